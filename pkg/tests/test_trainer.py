import csv
import dataclasses

import pytest
import torch

from umafd.backbone import BackboneConfig
from umafd.data import ClipDataset, ClipTensor, Modality, PairedBatch, Split, SynthConfig, synth_generate
from umafd.errors import ConfigError, DataError
from umafd.losses import LOSS_NAMES, WeightMode, total_loss
from umafd.model import parameter_checksum
from umafd.xbm import XBMMemory
from umafd.trainer import (
    LOG_HEADER,
    MomentumSGD,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    compute_losses,
    fit,
    load_checkpoint,
    lr_schedule,
    read_meta,
    train_step,
)

BCFG = BackboneConfig(stage1_channels=4, embedding_dim=8, n_stages=2, head_init_std=1.0)


def _batch(seed, label=1, T=4, H=16, W=16):
    g = torch.Generator().manual_seed(seed)
    rgb = ClipTensor(torch.rand(3, T, H, W, generator=g), Modality.RGB, label)
    dep = ClipTensor(torch.rand(3, T, H, W, generator=g), Modality.DEPTH, None)
    return PairedBatch(rgb, dep)


# ------------------------------------------------------------------ config / schedule / optimiser


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.5)
    with pytest.raises(ConfigError):
        TrainConfig(enabled_losses={"pseudo"})
    with pytest.raises(ConfigError):
        TrainConfig(enabled_losses={"cls", "focal"})
    with pytest.raises(ConfigError):
        TrainConfig(lambdas=(1, 1, 1, 1, -1))
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_factor=0)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(59, cfg) == 1e-4
    assert lr_schedule(60, cfg) == 1e-5
    assert lr_schedule(119, cfg) == 1e-5
    with pytest.raises(ConfigError):
        lr_schedule(120, cfg)
    with pytest.raises(ConfigError):
        lr_schedule(-1, cfg)


def test_momentum_two_step_closed_form():
    p = torch.nn.Parameter(torch.tensor([0.3, -1.2], dtype=torch.float64))
    g = torch.tensor([0.7, -0.25], dtype=torch.float64)
    opt = MomentumSGD([p], momentum=0.9)
    start = p.detach().clone()
    lr = 1e-2
    for _ in range(2):
        p.grad = g.clone()
        opt.step(lr)
    assert torch.allclose(p.detach() - start, -lr * g * (2 + 0.9), rtol=0, atol=1e-12)


def test_zero_lr_leaves_parameters_bit_exact():
    cfg = TrainConfig(base_lr=0.0)
    state = TrainState.fresh(BCFG, cfg)
    before = parameter_checksum(state.model)
    train_step(_batch(0), state, cfg)
    assert parameter_checksum(state.model) == before


# ------------------------------------------------------------------ step semantics


def test_cls_only_step_matches_reference_step():
    cfg = TrainConfig(enabled_losses={"cls"}, base_lr=0.05, seed=3)
    model = TrainState.fresh(BCFG, cfg).model.double()
    state = TrainState(model, MomentumSGD(model.parameters(), cfg.momentum), XBMMemory(4))
    ref = TrainState.fresh(BCFG, cfg).model.double()
    batch = _batch(1, label=0)
    batch = PairedBatch(ClipTensor(batch.rgb.data.double(), Modality.RGB, 0), ClipTensor(batch.depth.data.double(), Modality.DEPTH))

    # separately coded supervised step: BCE on the RGB score, then p <- p - lr * g (fresh velocity)
    net = ref.backbone
    s = ref.classifier(net.embed(net.trunk(net.stem(batch.rgb.data[None]))))
    loss = -torch.log1p(-s).mean()
    grads = torch.autograd.grad(loss, list(ref.parameters()), allow_unused=True)
    expected = [p.detach() - 0.05 * (g if g is not None else 0) for p, g in zip(ref.parameters(), grads)]

    train_step(batch, state, cfg)
    for p, e in zip(state.model.parameters(), expected):
        assert torch.allclose(p.detach(), e, rtol=0, atol=1e-9)


def test_cls_only_never_touches_depth():
    cfg = TrainConfig(enabled_losses={"cls"})
    state = TrainState.fresh(BCFG, cfg)
    dep = ClipTensor(modality=Modality.DEPTH, loader=lambda: pytest.fail("depth decoded"))
    rgb = _batch(0).rgb
    train_step(PairedBatch(rgb, dep), state, cfg)


def test_disabled_terms_are_exact_zero():
    cfg = TrainConfig(enabled_losses={"cls", "modality"}, seed=1)
    state = TrainState.fresh(BCFG, cfg)
    bundle, weights, entries = compute_losses(_batch(2), state, cfg)
    assert bundle.pseudo.item() == bundle.bridge.item() == bundle.triplet.item() == 0.0
    assert not bundle.pseudo.requires_grad and entries == []


def test_loss_isolation_gradients_unchanged():
    # disabled terms add exactly nothing: the total's gradient equals that of the live terms alone
    cfg = TrainConfig(enabled_losses={"cls", "modality"}, lambdas=(1.0, 5.0, 1.0, 5.0, 5.0), seed=4)
    batch = _batch(3)
    state = TrainState.fresh(BCFG, cfg)
    params = list(state.model.parameters())
    bundle, weights, _ = compute_losses(batch, state, cfg)

    g_total = torch.autograd.grad(total_loss(bundle, weights), params, allow_unused=True, retain_graph=True)
    g_live = torch.autograd.grad(bundle.cls + bundle.modality, params, allow_unused=True)
    for a, b in zip(g_total, g_live):
        assert (a is None and b is None) or torch.equal(a, b)


def test_adaptive_weights_on_simplex_and_logged():
    cfg = TrainConfig(weight_mode=WeightMode.ADAPTIVE, seed=0)
    state = TrainState.fresh(BCFG, cfg)
    _, bundle, weights = train_step(_batch(5), state, cfg)
    assert weights.mode is WeightMode.ADAPTIVE
    assert abs(weights.values.sum().item() - 1) < 1e-6


def test_determinism_ten_steps():
    def run():
        cfg = TrainConfig(base_lr=1e-3, seed=9)
        state = TrainState.fresh(BCFG, cfg)
        trace = [train_step(_batch(i, label=i % 2), state, cfg)[1].values() for i in range(10)]
        return trace, state.checksum()

    assert run() == run()


def test_nonfinite_loss_names_term(monkeypatch):
    cfg = TrainConfig(seed=0)
    state = TrainState.fresh(BCFG, cfg)
    import umafd.trainer as tr

    monkeypatch.setattr(tr, "bridge_loss", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError, match="bridge"):
        train_step(_batch(0), state, cfg)


# ------------------------------------------------------------------ fit


@pytest.fixture(scope="module")
def three_pairs(tmp_path_factory):
    cfg = SynthConfig(n_train_pairs=3, n_test_depth=2, T=8, H=16, W=16, noise_level=0.0, seed=0)
    return synth_generate(cfg, tmp_path_factory.mktemp("three"))


def _ds(root):
    return ClipDataset.from_root(root, 8, 16, 16)


def test_fit_counts_logs_and_checkpoints(three_pairs, tmp_path):
    calls = []
    cfg = TrainConfig(epochs=1, base_lr=1e-3, seed=0)
    res = fit(_ds(three_pairs), cfg, tmp_path, BCFG, on_step=lambda *a: calls.append(1))
    assert len(calls) == 3 and res.steps == 3
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_HEADER and len(rows) == 4
    assert (tmp_path / "ckpt_epoch_000.bin").exists() and (tmp_path / "ckpt_epoch_000.meta.json").exists()
    assert res.checkpoint.name == "ckpt_final.bin"
    meta = read_meta(res.checkpoint)
    assert meta["checksum"] == res.state.checksum() and meta["train"]["seed"] == 0


def test_fit_resume_equals_uninterrupted(three_pairs, tmp_path):
    cfg = TrainConfig(epochs=3, base_lr=1e-3, seed=2, lr_decay_epoch=1)
    full = fit(_ds(three_pairs), cfg, tmp_path / "full", BCFG)
    fit(_ds(three_pairs), cfg, tmp_path / "part", BCFG, stop_after_epoch=0)
    resumed = fit(_ds(three_pairs), cfg, tmp_path / "part", BCFG)
    assert resumed.state.checksum() == full.state.checksum()
    a = (tmp_path / "full" / "train_log.csv").read_text()
    b = (tmp_path / "part" / "train_log.csv").read_text()
    assert a == b


def test_checkpoint_roundtrip(three_pairs, tmp_path):
    cfg = TrainConfig(epochs=1, base_lr=1e-3, seed=1)
    res = fit(_ds(three_pairs), cfg, tmp_path, BCFG)
    state = load_checkpoint(res.checkpoint)
    assert state.checksum() == res.state.checksum()
    assert state.step == 3 and state.epoch == 1
    assert len(state.memory) == len(res.state.memory)
    (tmp_path / "bad.bin").write_bytes(b"junk")
    (tmp_path / "bad.meta.json").write_text("{}")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.bin")


def test_fit_validation_split_writes_best(three_pairs, tmp_path):
    cfg = TrainConfig(epochs=2, base_lr=1e-3, seed=0, val_fraction=0.3)
    res = fit(_ds(three_pairs), cfg, tmp_path, BCFG)
    assert (tmp_path / "ckpt_best.bin").exists()
    assert res.checkpoint.name == "ckpt_best.bin" and res.steps == 4


def test_fit_rejects_bad_datasets(three_pairs, tmp_path):
    ds = _ds(three_pairs)
    no_depth = ClipDataset([r for r in ds.records if r.modality is Modality.RGB], 8, 16, 16)
    with pytest.raises(DataError):
        fit(no_depth, TrainConfig(epochs=1), tmp_path, BCFG)
    ds2 = _ds(three_pairs)
    stripped = [dataclasses.replace(r, label=None) if r.modality is Modality.DEPTH and r.split is Split.TRAIN else r for r in ds2.records]
    with pytest.raises(DataError):
        fit(ClipDataset(stripped, 8, 16, 16), TrainConfig(epochs=1, enabled_losses={"cls"}, depth_supervised=True), tmp_path, BCFG)


def test_overfit_sanity(tmp_path):
    cfg = SynthConfig(n_train_pairs=4, n_test_depth=2, T=8, H=16, W=16, noise_level=0.0, seed=4)
    ds = ClipDataset.from_root(synth_generate(cfg, tmp_path / "ds"), 8, 16, 16)
    tcfg = TrainConfig(epochs=50, base_lr=0.01, enabled_losses={"cls"}, seed=0, lr_decay_epoch=50)
    res = fit(ds, tcfg, tmp_path / "run", BCFG)
    assert res.steps == 200
    with open(tmp_path / "run" / "train_log.csv") as fh:
        last = [float(r["cls"]) for r in csv.DictReader(fh)][-4:]
    assert max(last) < 0.05


def test_losses_logged_in_order():
    assert LOG_HEADER[1:6] == list(LOSS_NAMES)
