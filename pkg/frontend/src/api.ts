/** Typed client for the editing service's HTTP/JSON API.
 *
 * Every method maps to one documented endpoint; the UI holds no editing
 * logic of its own, so deleting this package leaves the service untouched.
 */

export interface JobProgress {
  iteration: number;
  total: number;
  loss: number | null;
  smoothed_loss: number | null;
}

export interface Job {
  id: string;
  kind: "abduct" | "edit" | "sweep";
  session_id: string;
  status: "queued" | "running" | "done" | "failed";
  progress: JobProgress;
  result: { hashes?: string[]; cached?: boolean; final_loss?: number | null };
  error: string | null;
}

export interface SessionManifest {
  id: string;
  status: string;
  prompts: { p: string; p_prime: string };
  config: Record<string, unknown>;
  checkpoints: number[];
  seeds: Record<string, number>;
}

export interface EditEcho {
  session_id: string;
  beta: number;
  eta_override: number | null;
  seed: number;
  steps: number;
  use_t_aux: boolean;
  anneal: boolean;
}

export interface EditRecord {
  request: EditEcho;
  hash: string;
  scores: Record<string, unknown>;
}

export interface EditBody {
  beta?: number;
  seed?: number;
  steps?: number;
  use_t_aux?: boolean;
  sweep_betas?: number[];
  n_seeds?: number;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function readError(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    /* non-JSON error body: keep statusText */
  }
  throw new ApiError(resp.status, detail);
}

export class StudioApi {
  constructor(
    private base: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) await readError(resp);
    return (await resp.json()) as T;
  }

  async createSession(
    image: Blob,
    p: string,
    pPrime: string,
    config: Record<string, unknown> = {},
  ): Promise<{ session_id: string; job_id: string }> {
    const form = new FormData();
    form.append("image", image, "source.png");
    form.append("p", p);
    form.append("p_prime", pPrime);
    form.append("config", JSON.stringify(config));
    return this.json("/sessions", { method: "POST", body: form });
  }

  getJob(jobId: string): Promise<Job> {
    return this.json(`/jobs/${jobId}`);
  }

  getSession(sessionId: string): Promise<SessionManifest> {
    return this.json(`/sessions/${sessionId}`);
  }

  listEdits(sessionId: string): Promise<EditRecord[]> {
    return this.json(`/sessions/${sessionId}/edits`);
  }

  requestEdit(sessionId: string, body: EditBody): Promise<{ job_id: string }> {
    return this.json(`/sessions/${sessionId}/edits`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  imageUrl(hash: string): string {
    return `${this.base}/images/${hash}`;
  }

  async imageBytes(hash: string): Promise<ArrayBuffer> {
    const resp = await this.fetchFn(this.imageUrl(hash));
    if (!resp.ok) await readError(resp);
    return resp.arrayBuffer();
  }

  /** Raw provenance record bytes; exports must pass these through untouched
   * so the exported echo stays byte-identical to the server's copy. */
  async recordBytes(hash: string): Promise<ArrayBuffer> {
    const resp = await this.fetchFn(`${this.base}/images/${hash}/record`);
    if (!resp.ok) await readError(resp);
    return resp.arrayBuffer();
  }

  async record(hash: string): Promise<EditRecord> {
    const bytes = await this.recordBytes(hash);
    return JSON.parse(new TextDecoder().decode(bytes)) as EditRecord;
  }

  /** Poll a job until it reaches a terminal state. */
  async waitForJob(
    jobId: string,
    opts: { intervalMs?: number; timeoutMs?: number; onProgress?: (job: Job) => void } = {},
  ): Promise<Job> {
    const interval = opts.intervalMs ?? 250;
    const deadline = Date.now() + (opts.timeoutMs ?? 600_000);
    for (;;) {
      const job = await this.getJob(jobId);
      opts.onProgress?.(job);
      if (job.status === "done" || job.status === "failed") return job;
      if (Date.now() > deadline) throw new Error(`job ${jobId} timed out`);
      await new Promise((r) => setTimeout(r, interval));
    }
  }
}
