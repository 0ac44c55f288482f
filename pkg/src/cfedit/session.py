"""Edit sessions: on-disk layout, manifest, provenance.

Layout under <root>/<session_id>/:
    manifest.json, source.png, u.adapter, delta.adapter, t_aux.adapter,
    checkpoints/u_<iter>.adapter, deltas/delta_eta_<eta>.adapter,
    losses.csv (phase, iteration, loss), edits/<hash>.png + <hash>.json
"""

from __future__ import annotations

import csv
import json
import os
import time
import uuid
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from cfedit.errors import ConfigError, SessionStateError


@dataclass(frozen=True)
class AbductionConfig:
    iterations: int = 1000
    learning_rate: float = 1e-4
    rank_u: int = 512
    rank_delta: int = 4
    eta: float = 0.6
    batch_size: int = 1
    checkpoint_iters: tuple[int, ...] = (250, 500, 1000)
    seed: int = 0
    u_placement: str = "attention_conv_ffn"  # attention_only = underfitting ablation

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.rank_u <= 0 or self.rank_delta <= 0:
            raise ConfigError("adapter ranks must be positive")
        if not 0 < self.eta <= 1:
            raise ConfigError(f"eta must be in (0, 1], got {self.eta}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def load_image(path: str | Path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def save_image(img01: torch.Tensor, path: str | Path) -> bytes:
    """Write a [0,1] CHW tensor as PNG; returns the encoded bytes."""
    arr = (img01.detach().clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path.read_bytes()


class EditSession:
    def __init__(self, directory: Path, manifest: dict):
        self.dir = Path(directory)
        self.manifest = manifest

    # ---- creation / loading ------------------------------------------------

    @classmethod
    def create(cls, root: str | Path, image01: torch.Tensor, p: str, p_prime: str,
               config: AbductionConfig | None = None,
               session_id: str | None = None) -> "EditSession":
        if not p.strip() or not p_prime.strip():
            raise ConfigError("both prompts must be nonempty")
        config = config or AbductionConfig()
        session_id = session_id or uuid.uuid4().hex[:12]
        directory = Path(root) / session_id
        directory.mkdir(parents=True, exist_ok=False)
        manifest = {
            "id": session_id,
            "created": time.time(),
            "prompts": {"p": p, "p_prime": p_prime},
            "config": asdict(config),
            "seeds": {},
            "status": "created",
            "checkpoints": [],
            "adapters": {},
            "loss_trace": "losses.csv",
            "schedule": None,
        }
        session = cls(directory, manifest)
        save_image(image01, directory / "source.png")
        session.save_manifest()
        return session

    @classmethod
    def load(cls, root: str | Path, session_id: str) -> "EditSession":
        directory = Path(root) / session_id
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise SessionStateError(f"unknown session {session_id!r}")
        return cls(directory, json.loads(manifest_path.read_text()))

    # ---- accessors ----------------------------------------------------------

    @property
    def id(self) -> str:
        return self.manifest["id"]

    @property
    def p(self) -> str:
        return self.manifest["prompts"]["p"]

    @property
    def p_prime(self) -> str:
        return self.manifest["prompts"]["p_prime"]

    @property
    def config(self) -> AbductionConfig:
        cfg = dict(self.manifest["config"])
        cfg["checkpoint_iters"] = tuple(cfg["checkpoint_iters"])
        return AbductionConfig(**cfg)

    @property
    def status(self) -> str:
        return self.manifest["status"]

    def source_image(self) -> torch.Tensor:
        return load_image(self.dir / "source.png")

    def adapter_path(self, name: str) -> Path:
        return self.dir / f"{name}.adapter"

    def checkpoint_path(self, iteration: int) -> Path:
        return self.dir / "checkpoints" / f"u_{iteration}.adapter"

    def delta_cache_path(self, eta: float) -> Path:
        return self.dir / "deltas" / f"delta_eta_{eta:g}.adapter"

    def edits_dir(self) -> Path:
        return self.dir / "edits"

    def has_adapter(self, name: str) -> bool:
        return self.adapter_path(name).exists()

    # ---- mutation -----------------------------------------------------------

    def save_manifest(self) -> None:
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        tmp.replace(self.dir / "manifest.json")

    def set_status(self, status: str) -> None:
        self.manifest["status"] = status
        self.save_manifest()

    def record_seed(self, phase: str, seed: int) -> None:
        self.manifest["seeds"][phase] = seed
        self.save_manifest()

    def append_losses(self, phase: str, losses: list[tuple[int, float]]) -> None:
        path = self.dir / self.manifest["loss_trace"]
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["phase", "iteration", "loss"])
            for it, loss in losses:
                writer.writerow([phase, it, f"{loss:.8f}"])

    def read_losses(self, phase: str | None = None) -> list[tuple[str, int, float]]:
        path = self.dir / self.manifest["loss_trace"]
        if not path.exists():
            return []
        with open(path, newline="") as fh:
            rows = [(r["phase"], int(r["iteration"]), float(r["loss"]))
                    for r in csv.DictReader(fh)]
        return [r for r in rows if phase is None or r[0] == phase]

    # ---- locking (one abduction job per session) ----------------------------

    def acquire_lock(self) -> None:
        lock = self.dir / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SessionStateError(f"session {self.id} is locked by another job")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release_lock(self) -> None:
        (self.dir / ".lock").unlink(missing_ok=True)
