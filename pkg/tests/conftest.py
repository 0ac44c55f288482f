import sys
from pathlib import Path

import numpy as np
import pytest
import torch

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from cfedit.abduction import abduct_u, run_abduction
from cfedit.backend import BackendConfig, ToyBackend
from cfedit.corpus import ToyCorpusSpec, _shape_mask, render_caption
from cfedit.session import AbductionConfig, EditSession

TOY32_CHECKPOINT = REPO / "models" / "toy32.npz"

# the standard toy fixture: a centered red circle edited into a blue circle
FIXTURE_P = "a red circle"
FIXTURE_P_PRIME = "a blue circle"
FIXTURE_CONFIG = AbductionConfig(iterations=1000, rank_u=32, rank_delta=4, eta=0.6,
                                 seed=0, checkpoint_iters=(250, 500, 1000))


@pytest.fixture(scope="session")
def spec32():
    return ToyCorpusSpec(resolution=32)


@pytest.fixture(scope="session")
def source_image(spec32):
    return torch.from_numpy(render_caption(spec32, FIXTURE_P))


@pytest.fixture(scope="session")
def ood_source_image(spec32):
    """A red circle on a horizontal brightness ramp.

    The ramp never appears in the training corpus (flat backgrounds only), so
    the backend cannot reproduce it from text alone and the image adapter has
    to carry real information about this particular source.  The ramp stays
    well below the foreground threshold so the probes still read it as
    background.
    """
    res = spec32.resolution
    ramp = np.linspace(0.07, 0.21, res, dtype=np.float32)
    img = np.empty((res, res, 3), dtype=np.float32)
    img[...] = ramp[None, :, None]
    mask = _shape_mask("circle", res, res / 2, res / 2, res * 0.24)
    img[mask] = np.asarray(spec32.colors["red"], dtype=np.float32)
    return torch.from_numpy(img.transpose(2, 0, 1))


@pytest.fixture(scope="session")
def tiny_backend(spec32):
    """Small untrained backend for mechanics tests (quality irrelevant)."""
    cfg = BackendConfig(channels=(16, 32, 64), resolution=32, T_max=100,
                        vocab=spec32.vocabulary(), seed=7)
    return ToyBackend(cfg)


@pytest.fixture(scope="session")
def backend32():
    """The pretrained 32x32 fixture backend (scripts/train_toy.py)."""
    if not TOY32_CHECKPOINT.exists():
        pytest.fail(f"missing fixture checkpoint {TOY32_CHECKPOINT}; "
                    "run scripts/train_toy.py --resolution 32 --out models/toy32.npz")
    return ToyBackend.load(TOY32_CHECKPOINT)


def make_tiny_session(root, backend, iterations=4, **overrides) -> EditSession:
    spec = ToyCorpusSpec(resolution=backend.config.resolution)
    img = torch.from_numpy(render_caption(spec, FIXTURE_P))
    defaults = dict(iterations=iterations, rank_u=8, rank_delta=4, eta=0.6, seed=0,
                    checkpoint_iters=(2, iterations))
    defaults.update(overrides)
    return EditSession.create(root, img, FIXTURE_P, FIXTURE_P_PRIME,
                              AbductionConfig(**defaults))


@pytest.fixture(scope="session")
def fixture_session(backend32, ood_source_image, tmp_path_factory):
    """Fully abducted standard fixture session, plus freeze-discipline checksums."""
    root = tmp_path_factory.mktemp("fixture_sessions")
    session = EditSession.create(root, ood_source_image, FIXTURE_P, FIXTURE_P_PRIME,
                                 FIXTURE_CONFIG, session_id="fixture-seed0")
    before = backend32.state_checksum()
    run_abduction(session, backend32, with_t_aux=True)
    after = backend32.state_checksum()
    return {"session": session, "checksum_before": before, "checksum_after": after,
            "root": root}


@pytest.fixture(scope="session")
def trend_sessions(backend32, ood_source_image, fixture_session, tmp_path_factory):
    """U-only abductions for seeds 0..2 (seed 0 reuses the standard fixture)."""
    sessions = [fixture_session["session"]]
    root = fixture_session["root"]
    for seed in (1, 2):
        cfg = AbductionConfig(iterations=1000, rank_u=32, rank_delta=4, eta=0.6,
                              seed=seed, checkpoint_iters=(250, 500, 1000))
        s = EditSession.create(root, ood_source_image, FIXTURE_P, FIXTURE_P_PRIME, cfg,
                               session_id=f"fixture-seed{seed}")
        abduct_u(s, backend32)
        sessions.append(s)
    return sessions
