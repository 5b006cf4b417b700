import json
import shutil

import numpy as np
import pytest
import torch

from cwdm.checkpoint import CheckpointError, Registry, RegistryError
from cwdm.data import DataError, MODALITIES, load_volume
from cwdm.sampler import (
    CaseSettings,
    ModalitySet,
    SamplingRequestError,
    conditional_sample,
    process_case,
    select_model,
    synthesize_volumes,
)
from cwdm.schedule import make_schedule
from cwdm.wavelet import dwt3d, pad_to_even


class FixedModel:
    """Always predicts the same coefficients; records what it was fed."""

    def __init__(self, x0):
        self.x0 = torch.as_tensor(x0, dtype=torch.float32)
        self.calls = []

    def __call__(self, X, t):
        self.calls.append((int(t[0]), X[0, 8:].clone()))
        return self.x0[None]


def conditions(rng, shape=(8, 8, 8)):
    return [rng.random(shape).astype(np.float32) for _ in range(3)]


def test_select_model(registry):
    target, ckpt = select_model(ModalitySet({m: np.zeros(2) for m in ("T1", "T1ce", "T2")}), registry)
    assert target == "FLAIR" and ckpt.target == "FLAIR"
    assert select_model(["FLAIR", "T1", "T2"], registry)[0] == "T1ce"
    with pytest.raises(SamplingRequestError, match="nothing to synthesize"):
        select_model(MODALITIES, registry)
    with pytest.raises(SamplingRequestError, match="exactly one modality may be missing"):
        select_model(["T1", "T2"], registry)
    partial = Registry({k: v for k, v in registry.entries.items() if k != "FLAIR"}, registry.root)
    with pytest.raises(RegistryError, match="FLAIR"):
        select_model(["T1", "T1ce", "T2"], partial)


def test_modality_set_invariants():
    with pytest.raises(SamplingRequestError, match="unknown"):
        ModalitySet({"PD": np.zeros(2)})
    with pytest.raises(SamplingRequestError, match="shapes"):
        ModalitySet({"T1": np.zeros((2, 2, 2)), "T2": np.zeros((2, 2, 4))})
    assert ModalitySet({"T2": np.zeros(1), "T1": np.zeros(1)}).missing == ("FLAIR", "T1ce")


@pytest.mark.parametrize("T", [1, 10])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fixed_prediction_is_reached_exactly(rng, T, seed):
    target = rng.random((8, 8, 8)).astype(np.float32)
    model = FixedModel(dwt3d(target))
    out = conditional_sample(model, conditions(rng), make_schedule(T=T), seed=seed, clamp=False)
    assert len(model.calls) == T
    assert [t for t, _ in model.calls] == list(range(T, 0, -1))
    np.testing.assert_allclose(out, target, atol=1e-5)
    # independent of x_T and of every intermediate noise draw
    other = conditional_sample(FixedModel(dwt3d(target)), conditions(rng), make_schedule(T=T), seed=seed + 100, clamp=False)
    assert np.array_equal(out, other)


def test_condition_channels_constant_over_chain(rng):
    conds = conditions(rng)
    model = FixedModel(np.zeros((8, 4, 4, 4)))
    conditional_sample(model, conds, make_schedule(T=6))
    expected = torch.cat([dwt3d(torch.from_numpy(c)) for c in conds])
    for _, c in model.calls:
        assert torch.equal(c, expected)


def test_brats_depth_is_cropped_back(rng):
    conds = [np.zeros((156, 240, 240), dtype=np.float32) for _ in range(3)]
    _, record = pad_to_even(np.zeros((155, 240, 240), dtype=np.float32))
    model = FixedModel(np.full((8, 78, 120, 120), 0.1))
    out = conditional_sample(model, conds, make_schedule(T=2), padding=record)
    assert out.shape == (155, 240, 240)


def test_clamp_and_request_errors(rng):
    model = FixedModel(dwt3d(np.full((8, 8, 8), 1.7)))
    assert conditional_sample(model, conditions(rng), make_schedule(T=3)).max() == 1.0
    with pytest.raises(SamplingRequestError, match="3 conditioning"):
        conditional_sample(model, conditions(rng)[:2], make_schedule(T=3))
    with pytest.raises(SamplingRequestError, match="differ in shape"):
        conditional_sample(model, conditions(rng)[:2] + [np.zeros((8, 8, 10))], make_schedule(T=3))


def test_real_model_determinism(registry, rng):
    ckpt = registry.load("T2")
    vols = {m: rng.random((16, 16, 16)) for m in ckpt.condition_order}
    a = synthesize_volumes(ckpt, vols, 5, CaseSettings())
    b = synthesize_volumes(ckpt, vols, 5, CaseSettings())
    c = synthesize_volumes(ckpt, vols, 6, CaseSettings())
    assert a.shape == (16, 16, 16) and a.dtype == np.float32
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_schedule_mismatch_rejected(registry, rng):
    ckpt = registry.load("T2")
    ckpt.payload["schedule"] = {**ckpt.payload["schedule"], "T": 50}
    with pytest.raises(CheckpointError, match="T=10"):
        synthesize_volumes(ckpt, {m: rng.random((16, 16, 16)) for m in ckpt.condition_order}, 0, CaseSettings())


@pytest.fixture
def flair_missing_case(toy_root, tmp_path):
    case = tmp_path / "in" / "TOY-00001"
    shutil.copytree(toy_root / "TOY-00001", case)
    (case / "TOY-00001-t2f.nii.gz").unlink()
    return case


def test_process_case_writes_flair(flair_missing_case, registry, tmp_path):
    rec = process_case(flair_missing_case, registry, tmp_path / "out", CaseSettings(seed=3))
    out = tmp_path / "out" / "TOY-00001" / "TOY-00001-t2f.nii.gz"
    assert rec["target"] == "FLAIR" and rec["output"] == str(out)
    vol = load_volume(out)
    ref = load_volume(flair_missing_case / "TOY-00001-t1n.nii.gz")
    assert vol.shape == (16, 16, 16) and 0.0 <= vol.data.min() and vol.data.max() <= 1.0
    np.testing.assert_allclose(vol.affine, ref.affine)
    log = json.loads((out.parent / "TOY-00001-synthesis.json").read_text())
    assert {"case_id", "target", "seed", "seconds", "checkpoint"} <= set(log)

    first = out.read_bytes()
    process_case(flair_missing_case, registry, tmp_path / "out", CaseSettings(seed=3))
    assert out.read_bytes() == first


def test_process_case_snapshots(flair_missing_case, registry, tmp_path):
    process_case(flair_missing_case, registry, tmp_path / "out", CaseSettings(snapshot_every=5))
    snaps = sorted(p.name for p in (tmp_path / "out" / "TOY-00001" / "snapshots").iterdir())
    assert snaps == ["x_00000.npy", "x_00005.npy"]


def test_process_case_forced_missing(toy_root, registry, tmp_path):
    rec = process_case(toy_root / "TOY-00000", registry, tmp_path, missing="T1ce")
    assert rec["target"] == "T1ce"
    assert (tmp_path / "TOY-00000" / "TOY-00000-t1c.nii.gz").is_file()


def test_process_case_empty_dir(registry, tmp_path):
    (tmp_path / "EMPTY").mkdir()
    with pytest.raises(DataError, match=r"EMPTY-t1n\{\.nii\.gz,\.nii,\.npy\}"):
        process_case(tmp_path / "EMPTY", registry, tmp_path / "out")
    with pytest.raises(DataError, match="does not exist"):
        process_case(tmp_path / "nope", registry, tmp_path / "out")
