"""Quantitative evaluation: alignment scores, the fidelity-vs-iterations curve,
and batch evaluation over (image, p, p_prime, type) files.

Scores always travel with a metric identity; tables never mix identities.
Desk-scale defaults are proxies (pixel+feature distance, caption-probe
agreement); full-scale scorers (LPIPS, CLIP-score) plug in by registering a
metric under a new identity.
"""

from __future__ import annotations

import csv
import json
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from scipy import stats

from cfedit.abduction import run_abduction
from cfedit.backend import ToyBackend
from cfedit.corpus import ToyCorpusSpec
from cfedit.editor import EditRequest, multi_seed, predict_edit
from cfedit.errors import SessionStateError
from cfedit.lora import load_adapter
from cfedit.probe import caption_agreement
from cfedit.schedule import ddim_sample
from cfedit.session import AbductionConfig, EditSession, load_image

log = logging.getLogger(__name__)

EDIT_TYPES = ("addition", "removal", "manipulation", "replacement",
              "style transfer", "face manipulation")

IMAGE_METRICS: dict[str, Callable] = {}
TEXT_METRICS: dict[str, Callable] = {}


def register_image_metric(metric_id: str, fn: Callable) -> None:
    IMAGE_METRICS[metric_id] = fn


def register_text_metric(metric_id: str, fn: Callable) -> None:
    TEXT_METRICS[metric_id] = fn


@dataclass(frozen=True)
class AlignmentScores:
    image_alignment: float
    text_alignment: float
    image_metric: str
    text_metric: str


def _toy_image_alignment(i: torch.Tensor, i_prime: torch.Tensor,
                         backend: ToyBackend) -> float:
    pixel = float(((i - i_prime) ** 2).mean())
    feat = float(torch.linalg.norm(backend.image_features(i) - backend.image_features(i_prime)))
    return -(pixel + feat)


def _pixel_image_alignment(i: torch.Tensor, i_prime: torch.Tensor, backend=None) -> float:
    return -float(((i - i_prime) ** 2).mean())


def _toy_text_alignment(i_prime: torch.Tensor, p_prime: str,
                        spec: ToyCorpusSpec) -> float:
    score, _ = caption_agreement(i_prime, p_prime, spec)
    return score


register_image_metric("toy_pixel_feature", _toy_image_alignment)
register_image_metric("pixel_mse", _pixel_image_alignment)
register_text_metric("toy_probe", _toy_text_alignment)


def image_alignment(i: torch.Tensor, i_prime: torch.Tensor,
                    metric_id: str = "toy_pixel_feature", **kwargs) -> float:
    """Negated distance under the named metric; higher = more faithful."""
    if i.shape != i_prime.shape:
        raise ValueError(f"resolution mismatch: {tuple(i.shape)} vs {tuple(i_prime.shape)}")
    if metric_id not in IMAGE_METRICS:
        raise KeyError(f"unknown image metric {metric_id!r}")
    return float(IMAGE_METRICS[metric_id](i, i_prime, **kwargs))


def text_alignment(i_prime: torch.Tensor, p_prime: str,
                   metric_id: str = "toy_probe", **kwargs) -> float:
    if metric_id not in TEXT_METRICS:
        raise KeyError(f"unknown text metric {metric_id!r}")
    return float(TEXT_METRICS[metric_id](i_prime, p_prime, **kwargs))


def spearman(xs, ys) -> float:
    """Rank correlation; constant series count as 0 (trend-neutral)."""
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return 0.0
    rho = stats.spearmanr(xs, ys).statistic
    return 0.0 if rho != rho else float(rho)


def fidelity_curve(session: EditSession, backend: ToyBackend, spec: ToyCorpusSpec,
                   seed: int = 0, steps: int = 30) -> list[dict]:
    """Prompt-swap editing per U checkpoint: sample with P' and no delta, then
    score both alignments against the source image and P'."""
    checkpoints = sorted(session.manifest["checkpoints"])
    if not checkpoints:
        raise SessionStateError("session has no U checkpoints")
    source = session.source_image()
    sched = backend.sched
    rows = []
    with torch.no_grad():
        text = backend.encode_text(session.p_prime)
    for it in checkpoints:
        u = load_adapter(session.checkpoint_path(it))
        gen = torch.Generator().manual_seed(seed)
        x_T = torch.randn(3, backend.config.resolution, backend.config.resolution,
                          generator=gen)
        with backend.install(u, "u", scale=1.0):
            with torch.no_grad():
                x0 = ddim_sample(x_T, steps,
                                 lambda x, t: backend.noise_net(x[None], torch.tensor([t]),
                                                                text)[0],
                                 sched)
        img = backend.decode_image(x0)
        rows.append({
            "iterations": it,
            "image_alignment": image_alignment(source, img, backend=backend),
            "text_alignment": text_alignment(img, session.p_prime, spec=spec),
            "image_metric": "toy_pixel_feature",
            "text_metric": "toy_probe",
        })
    return rows


@dataclass(frozen=True)
class EvalPair:
    image: str
    p: str
    p_prime: str
    type: str

    def __post_init__(self):
        if self.type not in EDIT_TYPES:
            raise ValueError(f"edit type {self.type!r} not in {EDIT_TYPES}")

    def pair_id(self) -> str:
        blob = json.dumps([self.image, self.p, self.p_prime, self.type])
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_batch(path: str | Path) -> list[EvalPair]:
    """CSV (columns image, p, p_prime, type) or JSON-lines with the same keys."""
    path = Path(path)
    pairs = []
    text = path.read_text()
    if path.suffix in (".jsonl", ".json"):
        for line in text.splitlines():
            if line.strip():
                pairs.append(EvalPair(**json.loads(line)))
    else:
        for row in csv.DictReader(text.splitlines()):
            pairs.append(EvalPair(**row))
    return pairs


def run_batch(pairs: list[EvalPair], backend: ToyBackend, spec: ToyCorpusSpec,
              out_dir: str | Path, session_root: str | Path,
              config: AbductionConfig | None = None, n_seeds: int = 8,
              steps: int = 30) -> dict:
    """Full pipeline per pair; resumable (pairs already scored are skipped).

    Scores the fixed first seed and, when n_seeds > 1, separately the
    best-of-n selection by text alignment; rows are labeled by selection.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / "scores.csv"
    done: set[str] = set()
    rows: list[dict] = []
    if scores_path.exists():
        with open(scores_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
            done = {r["pair_id"] for r in rows}
    for pair in pairs:
        pid = pair.pair_id()
        if pid in done:
            continue
        try:
            source = load_image(pair.image)
            session = EditSession.create(session_root, source, pair.p, pair.p_prime,
                                         config=config, session_id=f"batch-{pid}")
            run_abduction(session, backend)
            results = multi_seed(session, backend, beta=1.0, n_seeds=n_seeds,
                                 base_seed=0, steps=steps)
            scored = [(r, text_alignment(r.image, pair.p_prime, spec=spec))
                      for r in results]
            selections = [("first", *scored[0])]
            if n_seeds > 1:
                selections.append(("best_of_n", *max(scored, key=lambda s: s[1])))
            for label, result, ta in selections:
                rows.append({
                    "pair_id": pid, "type": pair.type,
                    "image_alignment": image_alignment(source, result.image,
                                                       backend=backend),
                    "text_alignment": ta,
                    "metric_id": "toy_pixel_feature/toy_probe",
                    "seed": result.request["seed"], "selection": label,
                })
        except Exception:
            log.exception("pair %s failed; continuing", pid)
            continue
        _write_scores(scores_path, rows)
    _write_scores(scores_path, rows)
    return summarize(rows)


def _write_scores(path: Path, rows: list[dict]) -> None:
    fields = ["pair_id", "type", "image_alignment", "text_alignment",
              "metric_id", "seed", "selection"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def summarize(rows: list[dict]) -> dict:
    """Per-type mean scores, split by selection label."""
    metric_ids = {r["metric_id"] for r in rows}
    if len(metric_ids) > 1:
        raise ValueError(f"refusing to aggregate across metric identities: {metric_ids}")
    table: dict = {}
    for row in rows:
        key = (row["type"], row["selection"])
        table.setdefault(key, []).append(
            (float(row["image_alignment"]), float(row["text_alignment"])))
    return {
        f"{t}/{sel}": {
            "n": len(vals),
            "image_alignment": sum(v[0] for v in vals) / len(vals),
            "text_alignment": sum(v[1] for v in vals) / len(vals),
        }
        for (t, sel), vals in sorted(table.items())
    }
