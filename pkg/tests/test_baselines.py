import numpy as np
import pytest
import torch

from iernlab import baselines as bl
from iernlab import numcore as nc
from iernlab import synthbench as sb
from iernlab.errors import ConfigurationError, ContractError
from iernlab.iern import ArchConfig, LossWeights, OptimizerConfig, TrainState, make_batch
from iernlab.runner import TrainConfig, accuracy, fit

F64 = torch.float64


def _clean_data(per_cell=12, seed=0):
    spec = sb.SyntheticSpec([[per_cell]] * 6, [sb.Degradation("identity")], pattern_seed=seed, noise_seed=seed + 1)
    return sb.build_split(spec)


def _arch(seed=0, **kw):
    return ArchConfig(width=8, n_emotions=6, n_confounders=kw.pop("n_confounders", 1), seed=seed, **kw)


# --- vanilla ---------------------------------------------------------------------------


def test_vanilla_fits_clean_data():
    data = _clean_data()
    cfg = TrainConfig(epochs=80, batch_size=16, seed=0, opt=OptimizerConfig(lr=3e-3))
    model, _ = fit("baseline", data, _arch(), cfg)
    assert accuracy(model, data) >= 0.99


def test_untrained_vanilla_is_near_chance():
    data = _clean_data(per_cell=20)
    accs = [accuracy(bl.VanillaModel(_arch(seed=s)), data) for s in range(5)]
    assert abs(np.mean(accs) - 1 / 6) < 0.1


def test_vanilla_is_deterministic():
    data = _clean_data(per_cell=4)
    a, la = fit("baseline", data, _arch(), TrainConfig(epochs=2, batch_size=8, seed=3))
    b, lb = fit("baseline", data, _arch(), TrainConfig(epochs=2, batch_size=8, seed=3))
    assert [r["terms"] for r in la] == [r["terms"] for r in lb]
    for k, v in a.f_c.params.snapshot().items():
        assert torch.equal(v, b.f_c.params[k])


# --- disentanglement only ------------------------------------------------------------------


def test_disentangle_without_adversary_only_trains_the_classifier_path():
    data = _clean_data(per_cell=4)
    m = bl.DisentangleModel(_arch())
    before = m.snapshot()
    batch = make_batch(data, np.arange(12))
    terms = bl.disentangle_step(m, batch, LossWeights(lambda1=0.0), TrainState())
    assert m.changed_components(before) == {"f_b", "g_e", "f_c"}
    assert set(terms) == {"L_e", "L_c", "L_r", "L_Cls"}


def test_disentangle_is_deterministic():
    data = _clean_data(per_cell=4)
    runs = [fit("disentangle", data, _arch(), TrainConfig(epochs=1, batch_size=8, seed=1))[1] for _ in range(2)]
    assert runs[0][0]["terms"] == runs[1][0]["terms"]


# --- re-sampling ---------------------------------------------------------------------------------


def _cells_dataset(sizes):
    y_e, y_c = [], []
    for (e, c), n in sizes.items():
        y_e += [e] * n
        y_c += [c] * n
    n = len(y_e)
    x = np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1)
    return sb.ConfoundedDataset(x, y_e, y_c, np.zeros(n), n_emotions=3, n_confounders=2)


def test_resample_balanced_is_unchanged_in_counts():
    ds = _cells_dataset({(0, 0): 5, (1, 1): 5, (2, 0): 5})
    out = bl.resample_dataset(ds, np.random.default_rng(0))
    assert np.array_equal(out.cell_counts(), ds.cell_counts())


def test_resample_two_and_eight():
    ds = _cells_dataset({(0, 0): 2, (1, 1): 8})
    out = bl.resample_dataset(ds, np.random.default_rng(0))
    assert len(out) == 16
    assert out.cell_counts()[0, 0] == 8 and out.cell_counts()[1, 1] == 8
    assert out.cell_counts()[2].sum() == 0  # empty cells stay empty
    # every element is an original sample with its own labels
    for x, e, c in zip(out.x[:, 0, 0, 0], out.y_e, out.y_c):
        i = int(x)
        assert ds.y_e[i] == e and ds.y_c[i] == c


# --- NWGM ----------------------------------------------------------------------------------------


def test_dictionary_examples():
    f = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=F64)
    assert torch.equal(bl.build_nwgm_dictionary(f, [0, 1]).entries, f)
    v = torch.tensor([[1.5, -2.0], [-1.5, 2.0]], dtype=F64)
    assert torch.equal(bl.build_nwgm_dictionary(v, [0, 0]).entries, torch.zeros(1, 2, dtype=F64))
    with pytest.raises(ConfigurationError):
        bl.build_nwgm_dictionary(f, [0, 0], n_confounders=2)


def test_dictionary_matches_direct_mean():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(40, 5))
    y = rng.integers(0, 3, size=40)
    y[:3] = [0, 1, 2]
    d = bl.build_nwgm_dictionary(torch.as_tensor(feats), y)
    for j in range(3):
        assert np.max(np.abs(d.entries[j].numpy() - feats[y == j].mean(axis=0))) < 1e-7


def _head(seed=0, dim=4, n_classes=3):
    return bl.NwgmHead(dim, dim, n_classes, seed=seed, dtype=F64)


def test_identical_entries_make_attention_irrelevant():
    head = _head()
    entry = torch.randn(4, dtype=F64)
    d = bl.NwgmDictionary(entry.repeat(3, 1))
    x = torch.randn(5, 4, dtype=F64)
    p = head.params
    expect = x @ p["W1"].T + p["b"] + entry @ p["W2"].T
    assert torch.allclose(bl.nwgm_forward(head, x, d), expect, atol=1e-12)


def test_zero_w2_is_linear_classifier():
    head = _head()
    with torch.no_grad():
        head.params["W2"].zero_()
    d = bl.NwgmDictionary(torch.randn(3, 4, dtype=F64))
    x = torch.randn(5, 4, dtype=F64)
    assert torch.allclose(bl.nwgm_forward(head, x, d), x @ head.params["W1"].T + head.params["b"], atol=1e-12)


def test_attention_is_a_simplex():
    for seed in range(10):
        head = _head(seed)
        g = torch.Generator().manual_seed(seed)
        alpha = head.attention(torch.randn(7, 4, dtype=F64, generator=g) * 5,
                               bl.NwgmDictionary(torch.randn(3, 4, dtype=F64, generator=g) * 5))
        assert (alpha >= 0).all() and torch.allclose(alpha.sum(1), torch.ones(7, dtype=F64), atol=1e-9)


def test_nwgm_is_only_an_approximation():
    # two strata with uniform prior: the exact backdoor prediction averages the
    # per-stratum softmaxes; NWGM applies one softmax to the expected feature.
    head = _head(dim=2, n_classes=2)
    with torch.no_grad():
        head.params["Wq"].zero_()  # uniform attention = P(d) = 1/2
        head.params["W1"].zero_()
        head.params["W2"].copy_(torch.tensor([[4.0, 0.0], [0.0, 4.0]], dtype=F64))
    entries = torch.tensor([[3.0, 0.0], [0.0, 0.5]], dtype=F64)
    x = torch.zeros(1, 2, dtype=F64)
    approx = nc.softmax(bl.nwgm_forward(head, x, bl.NwgmDictionary(entries)))
    exact = torch.stack([nc.softmax(head.params["b"] + e @ head.params["W2"].T) for e in entries]).mean(0)
    assert (approx - exact).abs().max() > 1e-3


def test_nwgm_trains_head_with_frozen_dictionary():
    data = sb.build_split(sb.SyntheticSpec([[3, 3]] * 6, [sb.Degradation("identity"), sb.Degradation("blur", 1.5)]))
    model, records = fit("nwgm", data, _arch(n_confounders=2), TrainConfig(epochs=1, batch_size=12, seed=0))
    assert [r["phase"] for r in records] == ["trunk", "nwgm"]
    before = model.dictionary.entries.clone()
    bl.nwgm_step(model, make_batch(data, np.arange(12)), TrainState())
    assert torch.equal(model.dictionary.entries, before)
    with pytest.raises(ConfigurationError):
        fit("nwgm", data, _arch(n_confounders=2), TrainConfig(epochs=1, weights=LossWeights(lambda1=0.0)))


def test_resample_rejects_empty():
    with pytest.raises(ContractError):
        bl.resample_dataset(_cells_dataset({}), np.random.default_rng(0))
