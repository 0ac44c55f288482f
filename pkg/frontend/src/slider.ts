/** β-slider behavior: release-triggered, deduplicated edit requests.
 *
 * Each edit is a full sampling run on the server, so live scrubbing is off
 * the table; we request only on release, skip values already in the gallery,
 * and queue at most one follow-up while a request is in flight.
 */

export const BETA_MIN = -1;
export const BETA_MAX = 1;
export const BETA_STEP = 0.25;

export function clampBeta(value: number): number {
  const snapped = Math.round(value / BETA_STEP) * BETA_STEP;
  // "|| 0" folds -0 to 0 so the value JSON-serializes canonically
  return Math.min(BETA_MAX, Math.max(BETA_MIN, snapped)) || 0;
}

/** The 5-stop transition strip from reconstruction to full edit. */
export function transitionStrip(stops = 5): number[] {
  if (stops < 2) throw new Error("a strip needs at least 2 stops");
  const step = (BETA_MAX - BETA_MIN) / (stops - 1);
  return Array.from({ length: stops }, (_, i) => BETA_MIN + i * step);
}

export type RequestFn = (beta: number) => Promise<void>;

/** Serializes slider releases: one request in flight, the latest other
 * release queued, stale intermediate values dropped. */
export class SliderQueue {
  private inFlight = false;
  private queued: number | null = null;

  constructor(
    private request: RequestFn,
    private isCached: (beta: number) => boolean,
  ) {}

  get pending(): number | null {
    return this.queued;
  }

  async release(value: number): Promise<void> {
    const beta = clampBeta(value);
    if (this.isCached(beta)) return;
    if (this.inFlight) {
      this.queued = beta;
      return;
    }
    this.inFlight = true;
    try {
      await this.request(beta);
    } finally {
      this.inFlight = false;
    }
    const next = this.queued;
    this.queued = null;
    if (next !== null && next !== beta) await this.release(next);
  }
}
