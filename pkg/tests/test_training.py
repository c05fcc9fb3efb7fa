import copy

import pytest
import torch

from dclgan.config import TrainConfig, from_flat
from dclgan.contrastive import patchnce_pair
from dclgan.errors import CheckpointError, NumericalError
from dclgan.objectives import gan_loss
from dclgan.training import (
    ImageBuffer,
    Trainer,
    buffer_query,
    load_checkpoint,
    lr_at_epoch,
    save_checkpoint,
    train,
)

from conftest import tiny_config, write_images


def rand_pair(size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, size, size, generator=g) * 2 - 1, torch.rand(1, 3, size, size, generator=g) * 2 - 1


# ---- schedule --------------------------------------------------------------


def test_lr_schedule_values():
    cfg = TrainConfig(epochs=400, lr=1e-4)
    assert lr_at_epoch(100, cfg) == 1e-4
    assert lr_at_epoch(200, cfg) == 1e-4
    assert lr_at_epoch(300, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at_epoch(400, cfg) == 0


def test_lr_schedule_shape():
    cfg = TrainConfig(epochs=200, lr=2e-4)
    lrs = [lr_at_epoch(e, cfg) for e in range(201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    slopes = {round(lrs[e + 1] - lrs[e], 15) for e in range(100, 200)}
    assert len(slopes) == 1 and all(lrs[e] == 2e-4 for e in range(101))


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at_epoch(401, TrainConfig(epochs=400))
    with pytest.raises(ValueError):
        lr_at_epoch(-1, TrainConfig(epochs=400))


# ---- replay buffer ---------------------------------------------------------


def test_buffer_fill_phase():
    buf = ImageBuffer(50, seed=0)
    img = torch.randn(3, 4, 4)
    assert torch.equal(buffer_query(buf, img), img)
    assert len(buf) == 1


def test_buffer_capped_and_monotone():
    buf = ImageBuffer(50, seed=0)
    sizes = []
    for i in range(200):
        buf.query_one(torch.full((3, 2, 2), float(i)))
        sizes.append(len(buf))
    assert sizes[49] == 50 and max(sizes) == 50
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_buffer_swap_policy():
    buf = ImageBuffer(50, seed=1)
    for i in range(50):
        buf.query_one(torch.full((1,), float(i)))
    new, old = 0, 0
    for i in range(50, 2050):
        out = buf.query_one(torch.full((1,), float(i)))
        if out.item() == i:
            new += 1
        else:
            old += 1
            assert out.item() < i
    assert 0.45 < new / 2000 < 0.55


def test_buffer_deterministic_under_seed():
    def run():
        buf = ImageBuffer(5, seed=3)
        return [buf.query(torch.full((2, 1), float(i))).tolist() for i in range(40)]

    assert run() == run()


def test_buffer_returns_detached():
    x = torch.randn(1, 3, 2, 2, requires_grad=True) * 2
    out = ImageBuffer(5).query(x)
    assert not out.requires_grad


def test_buffer_state_roundtrip():
    buf = ImageBuffer(3, seed=0)
    for i in range(10):
        buf.query_one(torch.tensor([float(i)]))
    clone = ImageBuffer(3, seed=99)
    clone.load_state_dict(copy.deepcopy(buf.state_dict()))
    for i in range(10, 30):
        assert torch.equal(buf.query_one(torch.tensor([float(i)])), clone.query_one(torch.tensor([float(i)])))


# ---- train step ------------------------------------------------------------


def _grads(params):
    return [None if p.grad is None else p.grad.clone() for p in params]


def test_step_populates_all_gradients_and_freezes_discriminators():
    t = Trainer(tiny_config(mode="SimDCL"))
    captured = {}
    d_step = t.opt_D.step

    def step_and_capture(*a, **k):
        out = d_step(*a, **k)
        captured["d"] = [p.detach().clone() for p in t.d_params]
        return out

    t.opt_D.step = step_and_capture
    t.train_step(*rand_pair())
    # generator-side and discriminator parameters all received nonzero gradient,
    # except the discriminators' output bias: while every score sits inside the
    # hinge margins its gradient is mean(-1) + mean(+1), exactly zero
    for name, net in t.bundle.networks().items():
        last_bias = [n for n, _ in net.named_parameters()][-1] if name.startswith("D_") else None
        for pname, p in net.named_parameters():
            assert p.grad is not None, f"{name}.{pname} has no gradient"
            if pname != last_bias:
                assert p.grad.abs().sum() > 0, f"{name}.{pname} has zero gradient"
    # the generator update left the discriminators where their own step put them
    for before, p in zip(captured["d"], t.d_params):
        assert torch.equal(before, p)


def test_generator_terms_do_not_reach_discriminators():
    t = Trainer(tiny_config(mode="SimDCL"))
    b = t.bundle
    x, y = rand_pair()
    fake_y, fake_x = b.G(x), b.F(y)
    res = patchnce_pair(x, y, b, 0.07, 16)
    idt = (b.F(x) - x).abs().mean() + (b.G(y) - y).abs().mean()
    for loss in (res.loss_x, res.loss_y, idt):
        grads = torch.autograd.grad(loss, t.d_params, allow_unused=True, retain_graph=True)
        assert all(g is None for g in grads)
    d_loss = gan_loss(b.D_Y(y), b.D_Y(fake_y.detach()), "discriminator") + gan_loss(
        b.D_X(x), b.D_X(fake_x.detach()), "discriminator"
    )
    grads = torch.autograd.grad(d_loss, t.g_params, allow_unused=True)
    assert all(g is None for g in grads)


def test_every_parameter_group_changes_within_20_steps():
    t = Trainer(tiny_config(mode="SimDCL"))
    before = {n: [p.detach().clone() for p in net.parameters()] for n, net in t.bundle.networks().items()}
    for i in range(20):
        t.train_step(*rand_pair(seed=i))
    for n, net in t.bundle.networks().items():
        for b0, p in zip(before[n], net.parameters()):
            assert not torch.equal(b0, p), f"a parameter of {n} never changed"


def test_single_direction_step():
    t = Trainer(tiny_config(ablation=dict(single_direction=True)))
    report = t.train_step(*rand_pair())
    assert set(report) == {"gan_G", "d_Y", "nce_X", "idt", "total_G"}
    assert t.bundle.F is None and t.bundle.D_X is None


def test_shared_embedding_storage_in_trainer():
    shared = Trainer(tiny_config(ablation=dict(shared_embedding=True))).bundle
    default = Trainer(tiny_config()).bundle
    assert shared.H_X.heads["down1"][0].weight.data_ptr() == shared.H_Y.heads["down1"][0].weight.data_ptr()
    assert default.H_X.heads["down1"][0].weight.data_ptr() != default.H_Y.heads["down1"][0].weight.data_ptr()


def test_non_finite_loss_aborts_naming_term():
    t = Trainer(tiny_config())
    x, y = rand_pair()
    y[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError, match="non-finite loss term .d_[XY]."):
        t.train_step(x, y)


def test_batch_size_two_step():
    t = Trainer(tiny_config(batch_size=2))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    report = t.train_step(x, x.flip(0))
    assert all(torch.isfinite(torch.tensor(v)) for v in report.values())


def test_identical_seeds_identical_reports():
    def run():
        t = Trainer(tiny_config(seed=11))
        return [t.train_step(*rand_pair(seed=i)) for i in range(10)]

    assert run() == run()


# ---- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip_bytes_and_params(tmp_path):
    t = Trainer(tiny_config(ablation=dict(shared_embedding=True)))
    for i in range(3):
        t.train_step(*rand_pair(seed=i))
    p1 = save_checkpoint(t.state_dict(), tmp_path / "a")
    state = load_checkpoint(p1)
    t2 = Trainer(from_flat(state["config"]))
    t2.load_state_dict(state)
    p2 = save_checkpoint(t2.state_dict(), tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()
    for (k1, v1), (k2, v2) in zip(t.bundle.state_dict().items(), t2.bundle.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    assert all(k.split("/", 1)[0] in t.bundle.NAMES for k in state["params"])


def test_checkpoint_mode_mismatch_refused(tmp_path):
    t = Trainer(tiny_config())
    path = save_checkpoint(t.state_dict(), tmp_path / "c")
    other = Trainer(tiny_config(mode="SimDCL"))
    with pytest.raises(CheckpointError, match="mode=DCL"):
        other.load_state_dict(load_checkpoint(path))


def test_checkpoint_fingerprint_mismatch_forced(tmp_path, caplog):
    t = Trainer(tiny_config())
    t.train_step(*rand_pair())
    path = save_checkpoint(t.state_dict(), tmp_path / "c")
    cfg = tiny_config()
    cfg.nce.temperature = 0.1  # not structural: same fingerprint
    Trainer(cfg).load_state_dict(load_checkpoint(path))
    ablated = tiny_config(ablation=dict(cycle_loss=True))  # structural flag, same networks
    Trainer(ablated).load_state_dict(load_checkpoint(path), force=True)
    assert "forced" in caplog.text


def test_corrupt_checkpoint_detected(tmp_path):
    path = save_checkpoint(Trainer(tiny_config()).state_dict(), tmp_path / "c")
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_resume_mid_run_is_bit_identical(tmp_path):
    straight = Trainer(tiny_config(seed=4))
    for i in range(6):
        straight.train_step(*rand_pair(seed=i))
    path = save_checkpoint(straight.state_dict(), tmp_path / "mid")
    tail_a = [straight.train_step(*rand_pair(seed=i)) for i in range(6, 12)]
    resumed = Trainer.from_checkpoint(path)
    tail_b = [resumed.train_step(*rand_pair(seed=i)) for i in range(6, 12)]
    assert tail_a == tail_b


# ---- full loop -------------------------------------------------------------


@pytest.fixture
def toy_dirs(tmp_path):
    d = tmp_path / "data"
    write_images(d / "trainA", 8, 40, seed=1, prefix="a")
    write_images(d / "trainB", 8, 40, seed=2, prefix="b")
    return d


def test_train_toy_five_epochs(tmp_path, toy_dirs):
    cfg = tiny_config(epochs=5, checkpoint_every=2)
    cfg.data.root = str(toy_dirs)
    result = train(cfg, tmp_path / "run")
    assert len(result.epochs) == 5
    lines = result.metrics_log.read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["step", "epoch", "lr"]
    assert len(lines) == 1 + 5 * 8
    epochs = (tmp_path / "run" / "epochs.tsv").read_text().splitlines()
    assert len(epochs) == 6
    ck = tmp_path / "run" / "checkpoints"
    assert {p.name for p in ck.iterdir()} == {"latest", "epoch_2", "epoch_4"}
    # lr held for epochs 0..2 (<= E/2 = 2.5) then decays linearly
    assert [r["lr"] for r in result.epochs] == [lr_at_epoch(e, cfg) for e in range(5)]


def test_train_resume_matches_uninterrupted(tmp_path, toy_dirs):
    def cfg_for(**kw):
        c = tiny_config(epochs=4, seed=5, **kw)
        c.data.root = str(toy_dirs)
        return c

    full = train(cfg_for(), tmp_path / "full")
    # stop after 2 epochs (16 steps) and resume into the same run dir
    part = cfg_for(max_steps=12)
    train(part, tmp_path / "part")
    resumed = train(cfg_for(), tmp_path / "part", resume=True)
    assert resumed.metrics_log.read_text() == full.metrics_log.read_text()
    a = load_checkpoint(full.checkpoint)["params"]
    b = load_checkpoint(resumed.checkpoint)["params"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_write_failure_is_clean(tmp_path, toy_dirs, monkeypatch):
    cfg = tiny_config(epochs=2)
    cfg.data.root = str(toy_dirs)

    def disk_full(*a, **k):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr("dclgan.training.save_checkpoint", disk_full)
    with pytest.raises(CheckpointError, match="after step 8"):
        train(cfg, tmp_path / "run")
