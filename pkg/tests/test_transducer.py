import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from funnel_asr.container import load_params, save_params
from funnel_asr.oracle import (
    brute_ilm,
    brute_rnnt_model_prob,
    brute_rnnt_prob,
    random_rnnt_instance,
    truncated_mass,
)
from funnel_asr.transducer import (
    HatModel,
    InternalLm,
    RnntLattice,
    build_lattice,
    context_of,
    default_label_mask,
    ilm_score,
    init_hat,
    joint,
    label_sync_beam_search,
    pred_features,
    rnnt_grad,
    rnnt_log_prob,
    rnnt_loss,
)
from funnel_asr.vocab import SOS_ID

MASK = np.array([False, False, True, True])
BLANK_LOGITS = np.array([[0.0, 1.0], [-1.0, 0.5]])


def _frozen_lattice():
    labels = np.zeros((2, 2, 4))
    labels[..., 3] = math.log(3.0)
    return RnntLattice(BLANK_LOGITS, labels, MASK)


def test_frozen_values():
    # frozen from brute-force enumeration; y=[2] also checks by hand:
    # two paths, each 0.5 * 0.25 * sigmoid(1) * sigmoid(0.5)
    lat = _frozen_lattice()
    assert rnnt_log_prob(lat, [2]) == pytest.approx(-2.1736330328182203, abs=1e-12)
    assert rnnt_log_prob(lat, [3]) == pytest.approx(-1.0750207441501103, abs=1e-12)
    s = 1 / (1 + math.exp(-1.0))
    hand = 2 * 0.5 * 0.25 * s * (1 / (1 + math.exp(-0.5)))
    assert rnnt_loss(lat, [2]) == pytest.approx(-math.log(hand), abs=1e-12)


def test_path_count_with_terminal_blank():
    # all nodes have blank 1/2 and one label with probability 1/2, so every
    # alignment has probability 2**-(T+U); there are C(T+U-1, U) of them
    for T, U in [(2, 1), (3, 2), (4, 3)]:
        lat = RnntLattice(np.zeros((T, U + 1)), np.zeros((T, U + 1, 3)), np.array([False, False, True]))
        paths = math.exp(rnnt_log_prob(lat, [2] * U)) * 2 ** (T + U)
        assert paths == pytest.approx(math.comb(T + U - 1, U))


@given(st.integers(1, 5), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_matches_enumeration(T, U, V, seed):
    lattice, y = random_rnnt_instance(np.random.default_rng(seed), T, U, V)
    assert -rnnt_loss(lattice, y) == pytest.approx(brute_rnnt_prob(lattice, y), abs=1e-10)


@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_node_normalisation(T, U, seed):
    lattice, _ = random_rnnt_instance(np.random.default_rng(seed), T, U, 3)
    total = np.exp(lattice.log_blank()) + np.exp(lattice.log_not_blank()) * np.exp(lattice.log_labels()).sum(-1)
    assert np.allclose(total, 1.0, atol=1e-12)
    node = lattice.node(0, 0)
    assert math.fsum(np.exp(node.emitted())) == pytest.approx(1.0, abs=1e-12)


def test_joint_distribution_masks_reserved_ids():
    model = init_hat(5, 3, seed=2)
    d = joint(np.ones(3), pred_features(context_of([]), model), model)
    assert d.log_labels[0] == -math.inf and d.log_labels[SOS_ID] == -math.inf
    assert math.exp(d.log_blank) + math.exp(d.log_not_blank) == pytest.approx(1.0)


def _fd(lattice, y, eps=1e-5):
    d_blank, d_label, _ = rnnt_grad(lattice, y)
    worst = 0.0
    for arr, grad in ((lattice.blank_logits, d_blank), (lattice.label_logits, d_label)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            keep = arr[idx]
            arr[idx] = keep + eps
            up = rnnt_loss(lattice, y)
            arr[idx] = keep - eps
            dn = rnnt_loss(lattice, y)
            arr[idx] = keep
            fd[idx] = (up - dn) / (2 * eps)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    lattice, y = random_rnnt_instance(np.random.default_rng(seed), 3, 2, 3)
    assert _fd(lattice, y) <= 1e-5


def test_gradient_is_zero_on_masked_ids_and_last_row():
    lattice, y = random_rnnt_instance(np.random.default_rng(7), 3, 2, 2)
    _, d_label, _ = rnnt_grad(lattice, y)
    assert np.all(d_label[..., :2] == 0)
    assert np.all(d_label[:, -1] == 0)


def test_lattice_validation():
    lattice, y = random_rnnt_instance(np.random.default_rng(0), 2, 2, 2)
    with pytest.raises(ValueError):
        rnnt_loss(lattice, y[:1])
    with pytest.raises(ValueError):
        rnnt_loss(lattice, [1, 2])


def test_truncated_mass_bounded_and_increasing():
    rng = np.random.default_rng(5)
    model = init_hat(3, 2, seed=5)  # one label
    model.b_blank = np.asarray(1.0)
    masses = truncated_mass(rng.normal(size=(2, 2)), model, 8)
    assert all(b >= a for a, b in zip(masses, masses[1:]))
    assert masses[-1] <= 1.0 + 1e-12


def test_mass_close_to_one_when_blank_likely():
    # blank probability >= 0.6 everywhere, T <= 3, single label
    rng = np.random.default_rng(11)
    for T in (1, 2, 3):
        b = rng.uniform(0.6, 0.95, size=(T, 11))
        lat = RnntLattice(np.log(b / (1 - b)), np.zeros((T, 11, 3)), np.array([False, False, True]))
        total = sum(
            math.exp(rnnt_log_prob(RnntLattice(lat.blank_logits[:, : n + 1], lat.label_logits[:, : n + 1], lat.label_mask), [2] * n))
            for n in range(11)
        )
        assert 0.99 < total <= 1.0 + 1e-12


def test_model_lattice_matches_oracle(rng):
    model = init_hat(5, 4, pred_dim=3, joint_dim=6, seed=1)
    enc = rng.normal(size=(3, 4))
    y = [3, 2, 4]
    assert rnnt_log_prob(build_lattice(enc, y, model), y) == pytest.approx(brute_rnnt_model_prob(enc, model, y), abs=1e-12)


def test_prediction_context():
    model = init_hat(5, 2, seed=0)
    assert context_of([]) == (SOS_ID, SOS_ID)
    assert context_of([4]) == (4, SOS_ID)
    assert context_of([2, 3, 4]) == (4, 3)
    with pytest.raises(ValueError):
        pred_features((0, 1), model)
    with pytest.raises(ValueError):
        pred_features((9, 1), model)
    with pytest.raises(ValueError):
        init_hat(2, 3)


def test_internal_lm():
    model = init_hat(6, 3, seed=4)
    ilm = InternalLm(model)
    v = ilm.next_token_logprobs([2, 5])
    assert v[0] == -math.inf and v[1] == -math.inf
    assert math.fsum(np.exp(v[2:])) == pytest.approx(1.0)
    assert ilm_score([2, 5, 3], model) == pytest.approx(brute_ilm(model, [2, 5, 3]), abs=1e-12)
    # the encoder projection plays no part
    other = model.copy()
    other.w_enc[:] = 7.0
    assert np.allclose(InternalLm(other).next_token_logprobs([2]), ilm.next_token_logprobs([2]))


def test_default_mask():
    assert default_label_mask(4).tolist() == [False, False, True, True]


def test_model_container_round_trip(tmp_path):
    model = init_hat(5, 3, seed=9)
    save_params(tmp_path / "m.bin", model.to_dict(), {"kind": "rnnt"})
    tensors, meta = load_params(tmp_path / "m.bin")
    back = HatModel.from_dict(tensors)
    assert meta == {"kind": "rnnt"}
    assert all(np.array_equal(getattr(back, k), v) for k, v in model.to_dict().items())


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_search_respects_symbol_cap(T, m, seed):
    rng = np.random.default_rng(seed)
    model = init_hat(4, 2, pred_dim=3, joint_dim=4, seed=int(rng.integers(1000)), scale=3.0)
    model.b_blank = np.asarray(-1.0)
    enc = rng.normal(size=(T, 2))
    hyps = label_sync_beam_search(enc, model, beam=10_000, max_symbols_per_frame=m)
    assert max(len(h.tokens) for h in hyps) <= T * m
    for h in hyps[:5]:
        assert h.acoustic == pytest.approx(brute_rnnt_model_prob(enc, model, h.tokens, max_symbols=m), abs=1e-10)


def test_search_validation(rng):
    model = init_hat(4, 2, seed=0)
    with pytest.raises(ValueError):
        label_sync_beam_search(rng.normal(size=(2, 2)), model, 0)
    with pytest.raises(ValueError):
        label_sync_beam_search(rng.normal(size=(2, 2)), model, 2, max_symbols_per_frame=0)
