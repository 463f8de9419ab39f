"""Factor geometry, trajectory synthesis, compositing, pose map, sequence files."""

import json
import os

import numpy as np
import pytest

from motionflow import SeededRng, Tensor
from motionflow.motionspace import (
    CapacityError,
    MotionWorld,
    PoseParams,
    SignalSpec,
    SurrogateExtractors,
    build_factor_spaces,
    composite_anchor,
    extract_features,
    get_space,
    pose_coeffs_from_params,
    pose_ground_truth,
    sequence_from_csv,
    sequence_to_csv,
    synthesize_sequence,
)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

DIMS = {"lip": 6, "pose": 6, "eye": 4, "residual": 16}


@pytest.fixture(scope="module")
def spaces():
    return build_factor_spaces(32, DIMS, seed=7)


@pytest.fixture(scope="module")
def world():
    return MotionWorld.build(d=32, seed=7)


# -- factor geometry ----------------------------------------------------------


def test_bases_orthonormal_within_each_factor(spaces):
    for s in spaces:
        gram = s.basis.T @ s.basis
        assert np.abs(gram - np.eye(s.dim)).max() < 1e-10, s.name


def test_bases_mutually_orthogonal(spaces):
    for i, a in enumerate(spaces):
        for b in spaces[i + 1:]:
            assert np.abs(a.basis.T @ b.basis).max() < 1e-10, (a.name, b.name)


def test_projector_is_idempotent(spaces):
    for s in spaces:
        p = s.projector()
        assert np.abs(p @ p - p).max() < 1e-10


def test_full_split_spans_identity():
    spaces = build_factor_spaces(4, {"lip": 1, "pose": 1, "eye": 1, "residual": 1}, seed=3)
    total = sum(s.projector() for s in spaces)
    assert np.abs(total - np.eye(4)).max() < 1e-10


def test_capacity_error():
    with pytest.raises(CapacityError):
        build_factor_spaces(4, {"lip": 2, "pose": 2, "eye": 1}, seed=0)
    with pytest.raises(ValueError, match="unknown factor"):
        build_factor_spaces(8, {"lip": 2, "mouth": 2}, seed=0)


def test_spaces_deterministic_per_seed():
    a = build_factor_spaces(16, {"lip": 3, "eye": 2}, seed=5)
    b = build_factor_spaces(16, {"lip": 3, "eye": 2}, seed=5)
    c = build_factor_spaces(16, {"lip": 3, "eye": 2}, seed=6)
    assert np.array_equal(a[0].basis, b[0].basis)
    assert not np.array_equal(a[0].basis, c[0].basis)


# -- synthesis ------------------------------------------------------------------


def test_latents_reconstruct_exactly_from_coeffs(spaces):
    seq, _ = synthesize_sequence(24, spaces, SignalSpec(), seed=11)
    rebuilt = sum(seq.factor_coeffs[s.name] @ s.basis.T for s in spaces)
    assert np.abs(seq.latents - rebuilt).max() < 1e-10


def test_single_frame_sequence(spaces):
    seq, cond = synthesize_sequence(1, spaces, SignalSpec(), seed=2)
    assert seq.latents.shape == (1, 32)
    assert cond.frames == 1
    with pytest.raises(ValueError):
        synthesize_sequence(0, spaces, SignalSpec(), seed=2)


def test_synthesis_deterministic(spaces):
    a = synthesize_sequence(16, spaces, SignalSpec(), seed=9)
    b = synthesize_sequence(16, spaces, SignalSpec(), seed=9)
    assert np.array_equal(a[0].latents, b[0].latents)
    assert np.array_equal(a[1].channels, b[1].channels)
    c = synthesize_sequence(16, spaces, SignalSpec(), seed=10)
    assert not np.array_equal(a[0].latents, c[0].latents)


def test_lip_is_linear_image_of_audio(spaces):
    seq, cond = synthesize_sequence(128, spaces, SignalSpec(lip_mode="linear"), seed=4)
    audio = cond.group("audio")
    lip = seq.factor_coeffs["lip"]
    sol, *_ = np.linalg.lstsq(audio, lip, rcond=None)
    residual = lip - audio @ sol
    assert np.abs(residual).max() < 1e-6


def test_lip_audio_r2_in_nonlinear_mode(spaces):
    seq, cond = synthesize_sequence(256, spaces, SignalSpec(lip_mode="tanh"), seed=4)
    audio = cond.group("audio")
    lip = seq.factor_coeffs["lip"]
    X = np.concatenate([audio, np.ones((audio.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(X, lip, rcond=None)
    pred = X @ sol
    ss_res = ((lip - pred) ** 2).sum()
    ss_tot = ((lip - lip.mean(axis=0)) ** 2).sum()
    assert 1.0 - ss_res / ss_tot > 0.95


def test_eye_track_is_piecewise_constant(spaces):
    seq, _ = synthesize_sequence(200, spaces, SignalSpec(), seed=13)
    eye = seq.factor_coeffs["eye"]
    diffs = np.linalg.norm(np.diff(eye, axis=0), axis=1)
    moved = diffs > 1e-12
    # saccade-like: some jumps happen, most frames hold perfectly still
    assert 0 < moved.sum() < 0.5 * len(diffs)
    assert np.all(diffs[~moved] == 0.0)


def test_pose_track_is_smooth_and_stationary(spaces):
    spec = SignalSpec(pose_rho=0.9, pose_scale=1.0)
    seq, _ = synthesize_sequence(2000, spaces, spec, seed=21)
    pose = seq.factor_coeffs["pose"]
    step_var = np.diff(pose, axis=0).var()
    # AR(1) steps have variance 2(1-rho)*scale^2, far below the marginal variance
    assert step_var < 0.5 * pose.var()
    assert 0.5 < pose.var() < 1.5


def test_editing_locality(spaces):
    seq, _ = synthesize_sequence(8, spaces, SignalSpec(), seed=5)
    pose = get_space(spaces, "pose")
    edited = seq.latents + (np.ones((8, pose.dim)) - seq.factor_coeffs["pose"]) @ pose.basis.T
    delta = edited - seq.latents
    outside = delta - pose.project(delta)
    assert np.abs(outside).max() < 1e-10


def test_condition_channels_mix_but_determine_factors(spaces):
    seq, cond = synthesize_sequence(64, spaces, SignalSpec(), seed=6)
    eye_chan = cond.group("eye")
    eye_coeff = seq.factor_coeffs["eye"]
    assert not np.allclose(eye_chan, eye_coeff)  # mixed, not copied
    sol, *_ = np.linalg.lstsq(eye_chan, eye_coeff, rcond=None)
    assert np.abs(eye_coeff - eye_chan @ sol).max() < 1e-8  # but linearly decodable


# -- compositing --------------------------------------------------------------------


def test_anchor_idempotent_on_equal_frames(spaces):
    seq, _ = synthesize_sequence(2, spaces, SignalSpec(), seed=3)
    v = seq.latents[0]
    assert np.abs(composite_anchor(v, v, spaces) - v).max() < 1e-12


def test_anchor_takes_eye_from_v1_rest_from_v2(spaces):
    a, _ = synthesize_sequence(1, spaces, SignalSpec(), seed=1)
    b, _ = synthesize_sequence(1, spaces, SignalSpec(), seed=2)
    v1, v2 = a.latents[0], b.latents[0]
    anchor = composite_anchor(v1, v2, spaces)
    for s in spaces:
        want = a.factor_coeffs[s.name][0] if s.name == "eye" else b.factor_coeffs[s.name][0]
        assert np.abs(anchor @ s.basis - want).max() < 1e-10, s.name


def test_anchor_matches_projector_oracle(spaces, rng):
    v1 = rng.normal(size=32)
    v2 = rng.normal(size=32)
    p_eye = get_space(spaces, "eye").projector()
    oracle = p_eye @ v1 + (np.eye(32) - p_eye) @ v2
    assert np.abs(composite_anchor(v1, v2, spaces) - oracle).max() < 1e-10


def test_anchor_shape_mismatch(spaces):
    with pytest.raises(ValueError):
        composite_anchor(np.zeros(32), np.zeros(16), spaces)
    with pytest.raises(ValueError):
        composite_anchor(np.zeros(16), np.zeros(16), spaces)


# -- pose parameterization -------------------------------------------------------------


def test_pose_zero_maps_to_zero():
    p = pose_ground_truth(np.zeros(6))
    assert np.array_equal(p.euler, np.zeros(3))
    assert np.array_equal(p.translation, np.zeros(3))


def test_pose_angles_bounded_and_monotone():
    big = pose_ground_truth(np.array([100.0, -100.0, 0.5, 7.0, -7.0, 0.0]))
    assert np.all(np.abs(big.euler) <= np.pi)
    assert np.array_equal(big.translation, [7.0, -7.0, 0.0])
    grid = np.linspace(-5, 5, 41)
    angles = [pose_ground_truth(np.array([c, 0, 0, 0, 0, 0])).euler[0] for c in grid]
    assert np.all(np.diff(angles) > 0)


def test_pose_roundtrip(rng):
    for _ in range(20):
        c = rng.uniform(-3.0, 3.0, size=6)
        back = pose_coeffs_from_params(pose_ground_truth(c))
        assert np.abs(back - c).max() / max(1.0, np.abs(c).max()) < 1e-9


def test_pose_requires_six_coeffs():
    with pytest.raises(ValueError):
        pose_ground_truth(np.zeros(5))


# -- surrogate extractors ---------------------------------------------------------------


def test_extractors_linear_and_frozen():
    ex = SurrogateExtractors(8, 4, 4, seed=42)
    a, b = np.arange(8.0), np.ones(8)
    lhs = extract_features(ex, a + b, "phi")
    rhs = extract_features(ex, a, "phi") + extract_features(ex, b, "phi")
    assert np.abs(lhs - rhs).max() < 1e-12
    assert np.array_equal(extract_features(ex, np.zeros(8), "psi"), np.zeros(4))
    again = SurrogateExtractors(8, 4, 4, seed=42)
    assert np.array_equal(ex.phi_map, again.phi_map)
    with pytest.raises(ValueError):
        ex.phi_map[0, 0] = 1.0


def test_extractors_differentiable():
    import motionflow as mf
    ex = SurrogateExtractors(8, 4, 4, seed=1)
    x = mf.tensor(np.arange(8.0), requires_grad=True)
    out = extract_features(ex, x, "phi")
    mf.backward((out ** 2).sum())
    oracle = 2.0 * ex.phi_map.T @ (ex.phi_map @ np.arange(8.0))
    assert np.abs(x.grad - oracle).max() < 1e-10


def test_extractor_golden_vector():
    with open(os.path.join(GOLDEN_DIR, "extract_features_seed42.json")) as fh:
        golden = json.load(fh)
    ex = SurrogateExtractors(golden["d"], golden["p"], golden["q"], seed=golden["seed"])
    out = extract_features(ex, np.array(golden["input"]), "phi")
    assert np.abs(out - np.array(golden["phi_output"])).max() < 1e-12
    out_psi = extract_features(ex, np.array(golden["input"]), "psi")
    assert np.abs(out_psi - np.array(golden["psi_output"])).max() < 1e-12


# -- sequence files ------------------------------------------------------------------------


def test_sequence_csv_roundtrip(world):
    seq, cond = world.synthesize(12, seed=31)
    text = sequence_to_csv(seq, cond, seed=31)
    assert text.startswith("# motionseq v1 d=32 F=12 ")
    back_seq, back_cond, seed = sequence_from_csv(text)
    assert seed == 31
    assert np.array_equal(back_seq.latents, seq.latents)
    assert np.array_equal(back_cond.channels, cond.channels)
    for name in seq.factor_coeffs:
        assert np.array_equal(back_seq.factor_coeffs[name], seq.factor_coeffs[name])
    assert back_cond.layout == cond.layout


def test_sequence_csv_rejects_garbage():
    with pytest.raises(ValueError, match="header"):
        sequence_from_csv("frame,x0\n0,1.0\n")


def test_world_bundle_consistency(world):
    assert world.cond_dim == 14
    seq, cond = world.synthesize(6, seed=1)
    assert cond.dim == world.cond_dim
    assert seq.latent_dim == world.d
    assert world.space("eye").dim == 4
