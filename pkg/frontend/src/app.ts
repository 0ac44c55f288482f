/** DOM wiring for the studio. All editing state lives on the server; this
 * file only renders what polling returns and issues documented requests. */

import { StudioApi, type Job } from "./api.js";
import { exportCard, triggerDownload } from "./exporter.js";
import { SliderQueue, clampBeta } from "./slider.js";
import {
  type SessionView,
  emptyView,
  etaChangeNeedsConfirmation,
  galleryFromRecords,
  lossPoint,
  selectCard,
  validateForm,
} from "./state.js";

const api = new StudioApi("");
let view: SessionView = emptyView();
let sessionId: string | null = null;
let lossSeries: { iteration: number; loss: number }[] = [];

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

function toast(message: string): void {
  const box = $("toasts");
  const el = document.createElement("div");
  el.className = "toast";
  el.textContent = message;
  box.appendChild(el);
  setTimeout(() => el.remove(), 6000);
}

async function refreshGallery(): Promise<void> {
  if (!sessionId) return;
  const records = await api.listEdits(sessionId);
  view = { ...view, cards: galleryFromRecords(records, view.cards) };
  renderGallery();
}

function renderGallery(): void {
  const grid = $("gallery");
  grid.replaceChildren();
  for (const card of view.cards) {
    const tile = document.createElement("figure");
    tile.className = card.selected ? "card selected" : "card";
    const img = document.createElement("img");
    img.src = api.imageUrl(card.hash);
    img.alt = card.label;
    const caption = document.createElement("figcaption");
    caption.textContent = `${card.label} · seed ${card.seed}` +
      (card.eta !== null ? ` · η ${card.eta}` : "");
    tile.append(img, caption);
    tile.addEventListener("click", () => {
      view = { ...view, cards: selectCard(view.cards, card.key) };
      renderGallery();
    });
    grid.appendChild(tile);
  }
  const selected = view.cards.find((c) => c.selected);
  ($("export") as HTMLButtonElement).disabled = !selected;
}

function drawLoss(): void {
  const canvas = $("loss-plot") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d");
  if (!ctx || lossSeries.length < 2) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const losses = lossSeries.map((p) => p.loss);
  const max = Math.max(...losses);
  const min = Math.min(...losses);
  ctx.beginPath();
  lossSeries.forEach((p, i) => {
    const x = (i / (lossSeries.length - 1)) * canvas.width;
    const y = canvas.height - ((p.loss - min) / (max - min || 1)) * canvas.height;
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.strokeStyle = "#4477cc";
  ctx.stroke();
}

function onAbductProgress(job: Job): void {
  $("progress-text").textContent =
    `${job.status} — iteration ${job.progress.iteration}/${job.progress.total}` +
    (job.progress.smoothed_loss !== null
      ? ` · smoothed loss ${job.progress.smoothed_loss.toFixed(5)}`
      : "");
  const point = lossPoint(job);
  if (point && lossSeries.at(-1)?.iteration !== point.iteration) {
    lossSeries.push(point);
    drawLoss();
  }
}

async function runEditJob(body: Parameters<StudioApi["requestEdit"]>[1]): Promise<void> {
  if (!sessionId) return;
  try {
    const { job_id } = await api.requestEdit(sessionId, body);
    const job = await api.waitForJob(job_id);
    if (job.status === "failed") toast(job.error ?? "edit failed");
    await refreshGallery();
  } catch (err) {
    toast(String(err));
  }
}

const sliderQueue = new SliderQueue(
  (beta) => runEditJob({ beta, seed: currentSeed(), steps: currentSteps() }),
  (beta) => view.cards.some((c) => c.beta === beta && c.seed === currentSeed() && c.eta === null),
);

const currentSeed = (): number => Number(($("seed") as HTMLInputElement).value) || 0;
const currentSteps = (): number => Number(($("steps") as HTMLInputElement).value) || 30;
const currentEta = (): number => Number(($("eta") as HTMLInputElement).value);

export function boot(): void {
  $("create-form").addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const fileInput = $("image") as HTMLInputElement;
    const form = {
      p: ($("p") as HTMLInputElement).value,
      pPrime: ($("p-prime") as HTMLInputElement).value,
      eta: currentEta(),
      hasImage: (fileInput.files?.length ?? 0) > 0,
    };
    const problems = validateForm(form);
    const errors = $("form-errors");
    errors.textContent = problems.join("; ");
    if (problems.length) return;
    try {
      const created = await api.createSession(fileInput.files![0]!, form.p, form.pPrime, {
        eta: form.eta,
      });
      sessionId = created.session_id;
      $("progress-view").hidden = false;
      lossSeries = [];
      const job = await api.waitForJob(created.job_id, { onProgress: onAbductProgress });
      if (job.status === "failed") {
        toast(job.error ?? "abduction failed");
        return;
      }
      $("edit-view").hidden = false;
      await refreshGallery();
    } catch (err) {
      errors.textContent = String(err);
    }
  });

  $("beta").addEventListener("change", (ev) => {
    const beta = clampBeta(Number((ev.target as HTMLInputElement).value));
    $("beta-label").textContent = beta === -1 ? "reconstruction" : `β = ${beta}`;
    void sliderQueue.release(beta);
  });

  $("eta").addEventListener("change", () => {
    const manifestEta = Number(view.manifest?.config?.eta ?? 0.6);
    const cached = view.cards.map((c) => c.eta).filter((e): e is number => e !== null);
    if (etaChangeNeedsConfirmation(manifestEta, currentEta(), cached)) {
      $("eta-warning").hidden = false; // re-abduction required; user confirms
    }
  });

  $("seed-grid-btn").addEventListener("click", () =>
    runEditJob({
      beta: clampBeta(Number(($("beta") as HTMLInputElement).value)),
      seed: currentSeed(),
      steps: currentSteps(),
      n_seeds: Number(($("n-seeds") as HTMLInputElement).value) || 8,
    }),
  );

  $("export").addEventListener("click", async () => {
    const selected = view.cards.find((c) => c.selected);
    if (!selected) return;
    triggerDownload(await exportCard(api, selected));
  });
}

if (typeof document !== "undefined" && document.getElementById("create-form")) {
  boot();
}
