"""Command-line surface for the whole pipeline.

Exit codes: 0 success, 1 runtime/training failure, 2 usage/state error.
Every command prints the seeds it used, so any run can be reproduced from
its invocation line.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click

from cfedit.backend import ToyBackend, heldout_loss, train_toy_backend
from cfedit.corpus import ToyCorpusSpec
from cfedit.errors import ConfigError, SessionStateError, TrainingError
from cfedit.session import AbductionConfig, EditSession, load_image

DEFAULT_SESSION_ROOT = "sessions"


def _session_root(override: str | None) -> Path:
    return Path(override or os.environ.get("CFEDIT_SESSION_ROOT", DEFAULT_SESSION_ROOT))


def _load_backend(path: str) -> ToyBackend:
    try:
        return ToyBackend.load(path)
    except Exception as exc:
        raise click.ClickException(f"cannot load backend: {exc}")


@click.group()
def main() -> None:
    """Counterfactual text-based image editing."""


@main.command("train-toy")
@click.option("--steps", default=8000, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--two-object-fraction", default=0.0, show_default=True)
@click.option("--out", default="models/toy/toy.npz", show_default=True)
def cmd_train_toy(steps, resolution, seed, batch_size, two_object_fraction, out):
    """Train the toy diffusion backend and save a checkpoint."""
    spec = ToyCorpusSpec(resolution=resolution, two_object_fraction=two_object_fraction)
    if steps == 0:
        click.echo("warning: 0 steps requested; saving an untrained baseline", err=True)
    try:
        backend = train_toy_backend(spec, steps=steps, seed=seed, batch_size=batch_size)
    except TrainingError as exc:
        click.echo(f"training failed: {exc}", err=True)
        sys.exit(1)
    backend.save(out)
    info = backend.config.info
    click.echo(f"checkpoint: {out}")
    click.echo(f"held-out loss: {info['heldout_loss']:.4f} (baseline {info['baseline_loss']:.4f})")


@main.command("abduct")
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--p", required=True, help="prompt describing the source image")
@click.option("--p-prime", required=True, help="prompt describing the edited image")
@click.option("--eta", default=0.6, show_default=True)
@click.option("--iters", default=1000, show_default=True)
@click.option("--rank-u", default=512, show_default=True)
@click.option("--rank-delta", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--with-t-aux", is_flag=True)
@click.option("--backend", "backend_path", default="models/toy/toy.npz", show_default=True)
@click.option("--session-root", default=None)
def cmd_abduct(image, p, p_prime, eta, iters, rank_u, rank_delta, seed, with_t_aux,
               backend_path, session_root):
    """Run both abductions on a source image; prints the session id."""
    from cfedit.abduction import run_abduction

    try:
        ckpts = tuple(c for c in (250, 500, 1000) if c <= iters) or (iters,)
        config = AbductionConfig(iterations=iters, eta=eta, rank_u=rank_u,
                                 rank_delta=rank_delta, seed=seed,
                                 checkpoint_iters=ckpts)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    backend = _load_backend(backend_path)
    img = load_image(image)
    if img.shape[-1] != backend.config.resolution:
        import torch.nn.functional as F
        img = F.interpolate(img[None], size=(backend.config.resolution,) * 2,
                            mode="bilinear", align_corners=False)[0]
    session = EditSession.create(_session_root(session_root), img, p, p_prime, config)
    try:
        run_abduction(session, backend, with_t_aux=with_t_aux)
    except Exception as exc:
        click.echo(f"abduction failed (partial session {session.id} preserved): {exc}",
                   err=True)
        sys.exit(1)
    losses = session.read_losses()
    final = {phase: loss for phase, _, loss in losses}
    click.echo(f"session: {session.id}")
    click.echo(f"seeds: {json.dumps(session.manifest['seeds'])}")
    for phase, loss in final.items():
        click.echo(f"final {phase} loss: {loss:.5f}")


@main.command("edit")
@click.option("--session", "session_id", required=True)
@click.option("--beta", default=1.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=30, show_default=True)
@click.option("--sweep-beta", "sweep_betas", default=None,
              help="comma-separated beta values")
@click.option("--n-seeds", default=None, type=int)
@click.option("--backend", "backend_path", default="models/toy/toy.npz", show_default=True)
@click.option("--session-root", default=None)
def cmd_edit(session_id, beta, seed, steps, sweep_betas, n_seeds, backend_path,
             session_root):
    """Produce edited images for a completed session."""
    from cfedit.editor import EditRequest, multi_seed, predict_edit, sweep_beta
    from cfedit.evalharness import text_alignment

    try:
        session = EditSession.load(_session_root(session_root), session_id)
    except SessionStateError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    backend = _load_backend(backend_path)
    spec = ToyCorpusSpec(resolution=backend.config.resolution)
    try:
        if sweep_betas:
            betas = [float(b) for b in sweep_betas.split(",")]
            results = sweep_beta(session, backend, betas, seed=seed, steps=steps)
        elif n_seeds:
            results = multi_seed(session, backend, beta=beta, n_seeds=n_seeds,
                                 base_seed=seed, steps=steps)
        else:
            results = [predict_edit(session, backend,
                                    EditRequest(session_id=session_id, beta=beta,
                                                seed=seed, steps=steps))]
    except SessionStateError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    for r in results:
        try:
            score = f"{text_alignment(r.image, session.p_prime, spec=spec):.2f}"
        except ValueError:
            score = "n/a"
        click.echo(f"{r.png_path}  beta={r.request['beta']:+.2f} "
                   f"seed={r.request['seed']} text_alignment={score}")


@main.command("eval")
@click.option("--batch", "batch_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", default="eval_out", show_default=True)
@click.option("--iters", default=1000, show_default=True)
@click.option("--n-seeds", default=8, show_default=True)
@click.option("--steps", default=30, show_default=True)
@click.option("--backend", "backend_path", default="models/toy/toy.npz", show_default=True)
@click.option("--session-root", default=None)
def cmd_eval(batch_path, out_dir, iters, n_seeds, steps, backend_path, session_root):
    """Run the full pipeline over a batch file and emit per-type score means."""
    from cfedit.evalharness import load_batch, run_batch

    if not Path(batch_path).exists():
        click.echo(f"batch file not found: {batch_path}", err=True)
        sys.exit(2)
    backend = _load_backend(backend_path)
    spec = ToyCorpusSpec(resolution=backend.config.resolution)
    pairs = load_batch(batch_path)
    ckpts = tuple(c for c in (250, 500, 1000) if c <= iters) or (iters,)
    config = AbductionConfig(iterations=iters, checkpoint_iters=ckpts)
    summary = run_batch(pairs, backend, spec, out_dir, _session_root(session_root),
                        config=config, n_seeds=n_seeds, steps=steps)
    click.echo(json.dumps(summary, indent=2))
    click.echo(f"scores: {Path(out_dir) / 'scores.csv'}")


@main.command("curve")
@click.option("--session", "session_id", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=30, show_default=True)
@click.option("--out", "out_dir", default=None)
@click.option("--backend", "backend_path", default="models/toy/toy.npz", show_default=True)
@click.option("--session-root", default=None)
def cmd_curve(session_id, seed, steps, out_dir, backend_path, session_root):
    """Fidelity-vs-iterations curve over the session's U checkpoints."""
    from cfedit.evalharness import fidelity_curve

    try:
        session = EditSession.load(_session_root(session_root), session_id)
    except SessionStateError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    backend = _load_backend(backend_path)
    spec = ToyCorpusSpec(resolution=backend.config.resolution)
    try:
        rows = fidelity_curve(session, backend, spec, seed=seed, steps=steps)
    except SessionStateError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    out = Path(out_dir or session.dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "fidelity_curve.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    png_path = out / "fidelity_curve.png"
    _plot_curve(rows, png_path)
    for row in rows:
        click.echo(f"iter {row['iterations']:>5}  image_alignment "
                   f"{row['image_alignment']:+.4f}  text_alignment "
                   f"{row['text_alignment']:.2f}")
    click.echo(f"csv: {csv_path}\nplot: {png_path}")


def _plot_curve(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    its = [r["iterations"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(its, [r["image_alignment"] for r in rows], "o-", color="tab:blue",
             label="image alignment")
    ax1.set_xlabel("abduction iterations")
    ax1.set_ylabel("image alignment", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(its, [r["text_alignment"] for r in rows], "s--", color="tab:red",
             label="text alignment")
    ax2.set_ylabel("text alignment", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
@click.option("--backend", "backend_path", default="models/toy/toy.npz", show_default=True)
@click.option("--session-root", default=None)
@click.option("--static-dir", default=None, help="studio UI asset directory")
def cmd_serve(host, port, backend_path, session_root, static_dir):
    """Run the HTTP job service."""
    import uvicorn

    from cfedit.service import ServiceSettings, create_app

    settings = ServiceSettings(session_root=str(_session_root(session_root)),
                               backend_path=backend_path, static_dir=static_dir)
    uvicorn.run(create_app(settings), host=host, port=port)


if __name__ == "__main__":
    main()
