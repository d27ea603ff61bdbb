import csv
import io

import numpy as np
import pytest

from sks import tensor as T
from sks.checkpoint import CheckpointError, load_checkpoint
from sks.config import OptimConfig, TrainConfig
from sks.data import Dataset, SyntheticConfig, generate_dataset, stack_samples, synth_generate
from sks.decoder import predict_mask
from sks.fusion import AblationFlags, ConfigError
from sks.io import load_pgm, load_tensor, save_tensor
from sks.losses import ConfusionCounts
from sks.model import ModelOutput
from sks.nn import Module
from sks.tensor import Parameter, Tensor
from sks.train import (ABLATION_FIELDS, SGD, BatchSampler, TrainingDiverged, evaluate, evaluate_checkpoint,
                       format_csv, infer, run_ablation, train_coarse, train_seg)


def _data(tmp_path, n=8, val=2, seed=0):
    cfg = SyntheticConfig(image_size=16, num_samples=n, val_samples=val, radius_min=2, radius_max=4,
                          lesion_probability=0.5, seed=seed)
    return generate_dataset(cfg, tmp_path / "data")


def _cfg(tiny_cfg, tmp_path, stage="coarse", **kw):
    base = dict(model=tiny_cfg, stage=stage, optim=OptimConfig(lr=0.05, momentum=0.9, steps=4, batch=4),
                dataset=str(tmp_path / "data"), eval_interval=2,
                checkpoint=str(tmp_path / f"{stage}.skpt"))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def coarse_run(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    cfg = _cfg(tiny_cfg, tmp_path)
    return ds, cfg, train_coarse(cfg, ds)


def test_sgd_momentum_rule():
    p = Parameter(np.array([1.0]), "p", dtype=np.float64)
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.8)
    p.grad = np.array([2.0])
    opt.step()  # v = 0.5 * 2 + 2 = 3
    assert p.data[0] == pytest.approx(0.5)


def test_batch_sampler():
    a = BatchSampler(10, 4, seed=3, stream=1)
    b = BatchSampler(10, 4, seed=3, stream=1)
    seq_a = np.concatenate([a.next() for _ in range(5)])
    seq_b = np.concatenate([b.next() for _ in range(5)])
    assert np.array_equal(seq_a, seq_b)
    assert sorted(seq_a[:10].tolist()) == list(range(10))
    assert np.array_equal(BatchSampler(5, 8, 0, 1).next(), np.arange(5))


def test_train_coarse_history_and_checkpoint(coarse_run):
    _, cfg, result = coarse_run
    steps = [r["step"] for r in result.history]
    assert steps == [0, 1, 2, 3, 4]
    assert all("train_accuracy" in r for r in result.history if r["step"] in (0, 2, 4))
    ckpt = load_checkpoint(result.checkpoint)
    assert ckpt.stage == "coarse" and all(n.startswith("coarse.") for n in ckpt.names())


def test_zero_lr_keeps_parameters(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    cfg = _cfg(tiny_cfg, tmp_path, optim=OptimConfig(lr=0.0, momentum=0.9, steps=3, batch=4), checkpoint="")
    result = train_coarse(cfg, ds)
    from sks.model import CoarseBranch
    fresh = CoarseBranch(tiny_cfg, seed=0)
    for (n, p), (_, q) in zip(sorted(result.model.named_parameters().items()),
                              sorted(fresh.named_parameters().items())):
        assert p.data.tobytes() == q.data.tobytes(), n
    accs = [r["train_accuracy"] for r in result.history if "train_accuracy" in r]
    assert len(set(accs)) == 1


def test_training_is_bitwise_deterministic(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    a = train_coarse(_cfg(tiny_cfg, tmp_path), ds)
    first = a.checkpoint.read_bytes()
    b = train_coarse(_cfg(tiny_cfg, tmp_path), ds)
    assert a.losses() == b.losses()
    assert b.checkpoint.read_bytes() == first


def test_divergence_is_reported(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    cfg = _cfg(tiny_cfg, tmp_path, optim=OptimConfig(lr=1e30, momentum=0.9, steps=6, batch=4), checkpoint="")
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="step"):
        train_coarse(cfg, ds)


def test_seg_freezes_coarse_branch(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    before = load_checkpoint(coarse.checkpoint)
    result = train_seg(_cfg(tiny_cfg, tmp_path, stage="seg"), ds, coarse.checkpoint)
    after = result.model.named_parameters()
    for name, array in before.params.items():
        assert after[name].data.tobytes() == array.tobytes()
    assert all("train_dsc" in r for r in result.history if r["step"] % 2 == 0)
    assert load_checkpoint(result.checkpoint).stage == "seg"


def test_seg_requires_coarse_checkpoint(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    with pytest.raises(ConfigError, match="coarse checkpoint"):
        train_seg(_cfg(tiny_cfg, tmp_path, stage="seg"), ds)


def test_seg_without_coarse_branch(tmp_path, tiny_cfg):
    ds = _data(tmp_path)
    cfg = _cfg(tiny_cfg, tmp_path, stage="seg", ablation=AblationFlags(no_coarse_branch=True))
    result = train_seg(cfg, ds)
    names = load_checkpoint(result.checkpoint).names()
    assert not any(n.startswith(("coarse.", "skip.fss.", "skip.prompt.")) for n in names)
    assert any(n.startswith("skip.rcs.") for n in names)


def test_seg_rejects_mismatched_coarse(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    other = TrainConfig(model=type(tiny_cfg)(**{**tiny_cfg.to_dict(), "embed_dim": 16}), stage="seg",
                        optim=OptimConfig(lr=0.01, momentum=0.9, steps=1, batch=2), checkpoint="")
    with pytest.raises(CheckpointError):
        train_seg(other, ds, coarse.checkpoint)


class _Stub(Module):
    """Returns fixed logits per image, looked up by the image's first pixel."""

    def __init__(self, table):
        self.table = table

    def __call__(self, image):
        logits = np.stack([self.table[int(round(float(x[0, 0, 0]) * 100))] for x in image.data])
        return ModelOutput(Tensor(logits[..., None]), None, None, [])


def _keyed(samples):
    for i, s in enumerate(samples):
        s.image = s.image.copy()
        s.image[0, 0, 0] = i / 100.0
    return samples


def test_evaluate_perfect_stub():
    samples = _keyed(synth_generate(SyntheticConfig(image_size=16, num_samples=6, radius_min=2, radius_max=4)))
    stub = _Stub({i: np.where(s.fine_mask > 0, 5.0, -5.0) for i, s in enumerate(samples)})
    row = evaluate(stub, samples).row()
    assert [row[k] for k in ("dsc", "jc", "precision", "recall")] == [1.0] * 4


def test_evaluate_background_stub_on_lesion_free_split():
    samples = _keyed(synth_generate(SyntheticConfig(image_size=16, num_samples=4, radius_min=2, radius_max=4,
                                                    lesion_probability=0.0)))
    stub = _Stub({i: np.full((16, 16), -1.0) for i in range(4)})
    row = evaluate(stub, samples).row()
    assert [row[k] for k in ("dsc", "jc", "precision", "recall")] == [1.0] * 4


def test_evaluate_empty_split_fails():
    with pytest.raises(ValueError, match="empty"):
        evaluate(_Stub({}), [])


def test_eval_matches_recount_from_saved_masks(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    seg = train_seg(_cfg(tiny_cfg, tmp_path, stage="seg"), ds, coarse.checkpoint)
    result = evaluate_checkpoint(seg.checkpoint, "val")
    total = ConfusionCounts()
    for s in ds.split("val"):
        save_tensor(tmp_path / f"{s.id}.skst", s.image)
        infer(seg.checkpoint, tmp_path / f"{s.id}.skst", tmp_path / "out" / s.id)
        mask = load_pgm(tmp_path / "out" / f"{s.id}.mask.pgm") // 255
        total = total + ConfusionCounts.from_masks(mask, s.fine_mask.astype(np.uint8))
    assert result.counts == total
    assert result.metrics == total.metrics()


def test_infer_outputs(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    seg = train_seg(_cfg(tiny_cfg, tmp_path, stage="seg"), ds, coarse.checkpoint)
    img = ds.samples[0].image
    save_tensor(tmp_path / "x.skst", img)
    m1, l1 = infer(seg.checkpoint, tmp_path / "x.skst", tmp_path / "r1")
    m2, l2 = infer(seg.checkpoint, tmp_path / "x.skst", tmp_path / "r2")
    assert (tmp_path / "r1.mask.pgm").read_bytes() == (tmp_path / "r2.mask.pgm").read_bytes()
    assert (tmp_path / "r1.logits.skst").read_bytes() == (tmp_path / "r2.logits.skst").read_bytes()
    pgm = load_pgm(tmp_path / "r1.mask.pgm")
    assert pgm.shape == img.shape[:2]
    logits = load_tensor(tmp_path / "r1.logits.skst")
    assert np.array_equal((logits[..., 0] > 0).astype(np.uint8) * 255, pgm)
    save_tensor(tmp_path / "bad.skst", np.zeros((8, 8, 3), np.float32))
    with pytest.raises(ValueError, match="shape"):
        infer(seg.checkpoint, tmp_path / "bad.skst", tmp_path / "r3")
    with pytest.raises(CheckpointError):
        infer(coarse.checkpoint, tmp_path / "x.skst", tmp_path / "r4")


def test_ablation_rows_and_determinism(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    cfg = _cfg(tiny_cfg, tmp_path, stage="seg", coarse_checkpoint=str(coarse.checkpoint),
               optim=OptimConfig(lr=0.05, momentum=0.9, steps=2, batch=4))
    rows = run_ablation(cfg, tmp_path / "ab1", ds)
    assert [r["method"] for r in rows] == ["w/o coarse-grain branch", "w/o prompt skip", "w/o RCS", "SKS (full)"]
    assert all(r["status"] == "ok" for r in rows)
    assert [r["reported_dsc"] for r in rows] == [0.420, 0.505, 0.467, 0.549]
    run_ablation(cfg, tmp_path / "ab2", ds)
    assert (tmp_path / "ab1" / "ablation.csv").read_text() == (tmp_path / "ab2" / "ablation.csv").read_text()
    parsed = list(csv.DictReader(io.StringIO((tmp_path / "ab1" / "ablation.csv").read_text())))
    assert list(parsed[0]) == ABLATION_FIELDS


def test_ablation_needs_coarse(tmp_path, tiny_cfg):
    with pytest.raises(ConfigError):
        run_ablation(_cfg(tiny_cfg, tmp_path, stage="seg"), tmp_path / "ab")


def test_ablation_failure_is_per_row(coarse_run, tmp_path, tiny_cfg):
    ds, _, coarse = coarse_run
    cfg = _cfg(tiny_cfg, tmp_path, stage="seg", coarse_checkpoint=str(coarse.checkpoint),
               optim=OptimConfig(lr=1e30, momentum=0.9, steps=3, batch=4))
    with np.errstate(all="ignore"):
        rows = run_ablation(cfg, tmp_path / "ab", ds)
    assert len(rows) == 4
    assert all(r["status"].startswith("failed") or r["status"] == "ok" for r in rows)


def test_format_csv():
    text = format_csv([{"method": "x", "dsc": 0.5, "jc": 1 / 3, "precision": 1.0, "recall": 0.25}],
                      ["method", "dsc", "jc", "precision", "recall"])
    assert text.splitlines()[0] == "method,dsc,jc,precision,recall"
    assert float(text.splitlines()[1].split(",")[2]) == 1 / 3
