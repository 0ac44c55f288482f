/** Session view-state: a pure mirror of server artifacts.
 *
 * Gallery cards come only from server edit records, keyed by
 * (beta, eta, seed); the client never fabricates scores or hashes, so the
 * view can always be rebuilt from a fresh poll.
 */

import type { EditRecord, Job, SessionManifest } from "./api.js";

export interface GalleryCard {
  key: string;
  beta: number;
  eta: number | null;
  seed: number;
  hash: string;
  label: string;
  scores: Record<string, unknown>;
  selected: boolean;
}

export interface SessionView {
  manifest: SessionManifest | null;
  abductJob: Job | null;
  pendingJobs: string[];
  cards: GalleryCard[];
  toasts: string[];
}

export function emptyView(): SessionView {
  return { manifest: null, abductJob: null, pendingJobs: [], cards: [], toasts: [] };
}

export function cardKey(beta: number, eta: number | null, seed: number): string {
  return `${beta}|${eta ?? "default"}|${seed}`;
}

export function cardLabel(beta: number): string {
  if (beta === -1) return "reconstruction";
  if (beta === 1) return "full edit";
  return `β = ${beta}`;
}

/** Rebuild the gallery from server records, preserving any selection whose
 * card still exists. One record per (beta, eta, seed): the server caches
 * identical requests, so later duplicates carry the same hash. */
export function galleryFromRecords(
  records: EditRecord[],
  previous: GalleryCard[] = [],
): GalleryCard[] {
  const selectedKeys = new Set(previous.filter((c) => c.selected).map((c) => c.key));
  const byKey = new Map<string, GalleryCard>();
  for (const record of records) {
    const req = record.request;
    const key = cardKey(req.beta, req.eta_override, req.seed);
    byKey.set(key, {
      key,
      beta: req.beta,
      eta: req.eta_override,
      seed: req.seed,
      hash: record.hash,
      label: cardLabel(req.beta),
      scores: record.scores,
      selected: selectedKeys.has(key),
    });
  }
  return [...byKey.values()].sort(
    (a, b) => a.beta - b.beta || (a.eta ?? -1) - (b.eta ?? -1) || a.seed - b.seed,
  );
}

export function selectCard(cards: GalleryCard[], key: string): GalleryCard[] {
  if (!cards.some((c) => c.key === key)) return cards;
  return cards.map((c) => ({ ...c, selected: c.key === key }));
}

export function applyJobUpdate(view: SessionView, job: Job): SessionView {
  const next: SessionView = { ...view };
  if (job.kind === "abduct") next.abductJob = job;
  if (job.status === "done" || job.status === "failed") {
    next.pendingJobs = view.pendingJobs.filter((id) => id !== job.id);
    if (job.status === "failed" && job.error) {
      next.toasts = [...view.toasts, job.error];
    }
  } else if (!view.pendingJobs.includes(job.id)) {
    next.pendingJobs = [...view.pendingJobs, job.id];
  }
  return next;
}

/** Smoothed-loss series for the live descent plot (nulls dropped). */
export function lossPoint(job: Job): { iteration: number; loss: number } | null {
  const { iteration, smoothed_loss } = job.progress;
  return smoothed_loss === null ? null : { iteration, loss: smoothed_loss };
}

export interface FormState {
  p: string;
  pPrime: string;
  eta: number;
  hasImage: boolean;
}

/** Inline validation mirroring the server's 400 rules plus the η slider
 * bounds; returns human-readable problems, empty when submittable. */
export function validateForm(form: FormState): string[] {
  const problems: string[] = [];
  if (!form.p.trim()) problems.push("enter the source prompt P");
  if (!form.pPrime.trim()) problems.push("enter the edited prompt P′");
  if (!(form.eta > 0 && form.eta <= 1)) problems.push("η must be in (0, 1]");
  if (!form.hasImage) problems.push("choose an image");
  return problems;
}

/** η lives in the second abduction, so changing it means re-abducting the
 * text adapter; the UI surfaces that cost instead of silently paying it. */
export function etaChangeNeedsConfirmation(
  current: number,
  requested: number,
  cachedEtas: number[],
): boolean {
  return requested !== current && !cachedEtas.includes(requested);
}
