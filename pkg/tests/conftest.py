import numpy as np
import pytest

# criterion number -> (status, title, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}

from sstbert import encoder as E
from sstbert.synthetic import make_treebank, write_treebank
from sstbert.tokenizer import Batch


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    return write_treebank(tmp_path_factory.mktemp("sst"), sizes=(400, 100, 100), seed=3)


@pytest.fixture(scope="session")
def synthetic_trees():
    return make_treebank(300, seed=11)


def micro_config(**kw) -> E.EncoderConfig:
    base = dict(num_layers=2, hidden_size=8, num_heads=2, feedforward_size=12, vocab_size=17, max_len=8,
                dropout_p=0.0)
    base.update(kw)
    return E.EncoderConfig(**base)


def random_batch(rng, cfg: E.EncoderConfig, b=3, t=6, labels=None) -> Batch:
    ids = rng.integers(5, cfg.vocab_size, size=(b, t))
    ids[:, 0] = 2
    lengths = rng.integers(3, t + 1, size=b)
    lengths[0] = t
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int64)
    ids[np.arange(b), lengths - 1] = 3
    ids[mask == 0] = 0
    seg = np.zeros_like(ids)
    return Batch(ids, mask, seg, labels)


def full_loss(model: E.Model, batch: Batch, rows, cols, targets, nsp_labels=None) -> float:
    """Classifier + MLM (+ NSP) loss; fills model gradients as a side effect."""
    from sstbert import tensor as T

    model.zero_grad()
    out, cache = E.forward(model, batch, training=False)
    logits, ccache = E.classifier_forward(model, out.pooled)
    loss, dlogits = T.cross_entropy(logits, batch.labels)
    d_pooled = E.classifier_backward(model, dlogits, ccache)
    mlogits, mcache = E.mlm_forward(model, out.hidden, rows, cols)
    mloss, dm = T.cross_entropy(mlogits, targets)
    d_hidden = E.mlm_backward(model, dm, mcache)
    loss += mloss
    if nsp_labels is not None:
        nlogits, pooled = E.nsp_forward(model, out.pooled)
        nloss, dn = T.cross_entropy(nlogits, nsp_labels)
        d_pooled = d_pooled + E.nsp_backward(model, dn, pooled)
        loss += nloss
    E.backward(model, cache, d_hidden, d_pooled)
    return float(loss)


def gradient_check(model: E.Model, rng, h=1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients over every parameter."""
    from sstbert import tensor as T

    cfg = model.config
    batch = random_batch(rng, cfg, b=3, t=6, labels=rng.integers(0, model.num_classes, size=3))
    rows = np.array([0, 1, 2, 0])
    cols = np.array([1, 1, 1, 2])
    targets = rng.integers(5, cfg.vocab_size, size=4)
    nsp_labels = rng.integers(0, 2, size=3) if model.nsp else None
    full_loss(model, batch, rows, cols, targets, nsp_labels)
    analytic = {k: p.grad.copy() for k, p in model.params.items()}
    worst = 0.0
    for k, p in model.params.items():
        num = T.numerical_gradient(lambda: full_loss(model, batch, rows, cols, targets, nsp_labels), p.data, h)
        worst = max(worst, T.relative_error(analytic[k], num))
    return worst


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title} | {detail}")
