"""Acceptance criteria, one test per criterion, each with its runtime budget.

The desk-scale run (criteria 8 and 9) trains the desk profile twice on CPU and
takes several minutes. A verdict line per criterion is printed in the
terminal summary.
"""

import csv
import time

import numpy as np
import pytest

from oracles import forward_marginal_zscores, gradient_check, oracle_inversion_error
from sdemg.baselines import hp_denoise, ts_denoise, ts_subtract
from sdemg.harness import pipeline
from sdemg.harness.config import load_config
from sdemg.ingest import Waveform, decode_212
from sdemg.metrics import arv_vector, mf_vector, rmse, snr_db, snr_improvement
from sdemg.preprocess import mix_at_snr, power
from sdemg.schedules import cosine_schedule


def note(request, text):
    request.node.criterion_detail = text


def desk_config(root, **extra):
    keys = {
        "snr_grid_test": "-10",
        "paths.corpus_dir": str(root / "corpus"),
        "paths.train_dir": str(root / "train"),
        "paths.val_dir": str(root / "val"),
        "paths.test_dir": str(root / "test"),
        "paths.checkpoint": str(root / "model.ckpt"),
        "paths.report": str(root / "report"),
    }
    return load_config(None, "desk", {**keys, **extra})


@pytest.mark.criterion(1, "schedule invariants and closed form")
def test_criterion_01_schedule(request):
    start = time.perf_counter()
    for T in (1, 25, 50, 200):
        s = cosine_schedule(T)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert 0 < s.alpha_bars[-1] <= s.alpha_bars[0] < 1
        assert T == 1 or s.alpha_bars[-1] < s.alpha_bars[0]
        assert s.gammas[0] == 1.0 and np.array_equal(s.gammas[1:], np.sqrt(s.alpha_bars))
        assert np.all(np.diff(s.gammas) < 0)
    f = lambda x: np.cos((x + 0.008) / 1.008 * np.pi / 2) ** 2  # noqa: E731
    err = abs(cosine_schedule(1000).alpha_bar(500) - f(0.5) / f(0.0))
    elapsed = time.perf_counter() - start
    note(request, f"|error| at T=1000,t=500: {err:.2e}; {elapsed:.3f}s")
    assert err < 1e-12
    assert elapsed < 1.0


@pytest.mark.criterion(2, "forward-marginal Monte Carlo")
def test_criterion_02_forward_marginal(request):
    start = time.perf_counter()
    z = {ab: forward_marginal_zscores(ab, n=100_000) for ab in (0.9, 0.5, 0.1)}
    elapsed = time.perf_counter() - start
    worst = max(abs(v) for pair in z.values() for v in pair)
    note(request, f"max |z| {worst:.2f}; {elapsed:.2f}s")
    assert worst < 3
    assert elapsed < 10


@pytest.mark.criterion(3, "oracle inversion with deterministic sampling")
def test_criterion_03_oracle_inversion(request):
    start = time.perf_counter()
    errs = {T: oracle_inversion_error(T) for T in (1, 5, 25)}
    elapsed = time.perf_counter() - start
    note(request, "rel. errors " + ", ".join(f"T={T}: {e:.1e}" for T, e in errs.items()) + f"; {elapsed:.2f}s")
    assert max(errs.values()) < 1e-4
    assert elapsed < 5


@pytest.mark.criterion(4, "autodiff vs finite differences")
def test_criterion_04_gradient(request):
    start = time.perf_counter()
    errors = gradient_check(n_params=60)
    elapsed = time.perf_counter() - start
    note(request, f"{errors.size} parameters, max rel. error {errors.max():.1e}; {elapsed:.1f}s")
    assert errors.size >= 50 and errors.max() < 1e-3
    assert elapsed < 60


@pytest.mark.criterion(5, "mixing precision over 1000 cases")
def test_criterion_05_mixing(request):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(100, 5001))
        clean = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 10), 1000)
        ecg = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 10), 1000)
        target = rng.uniform(-15, 0)
        pair = mix_at_snr(clean, ecg, target)
        worst = max(worst, abs(10 * np.log10(power(pair.clean) / power(pair.ecg)) - target),
                    abs(snr_db(pair.clean, pair.noisy) - target))
    elapsed = time.perf_counter() - start
    note(request, f"max deviation {worst:.1e} dB; {elapsed:.2f}s")
    assert worst < 1e-6
    assert elapsed < 5


@pytest.mark.criterion(6, "metric oracles")
def test_criterion_06_metrics(request):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    c, n = rng.standard_normal(5000), rng.standard_normal(5000)
    identity = snr_improvement(c, c + n, c + n)
    t = np.arange(10_000) / 1000
    unit = np.sin(2 * np.pi * 47.3 * t)
    rms_err = abs(rmse(np.zeros_like(unit), unit) - 1 / np.sqrt(2))
    mf = mf_vector(Waveform(np.sin(2 * np.pi * 100 * t), 1000))
    arv = arv_vector(Waveform(unit, 1000), window_s=5.0)
    elapsed = time.perf_counter() - start
    note(request, f"identity {identity}, RMS err {rms_err:.1e}, MF {mf.min():.2f}-{mf.max():.2f} Hz, "
                  f"ARV err {np.abs(arv - 2 / np.pi).max():.1e}; {elapsed:.2f}s")
    assert identity == 0.0
    assert rms_err < 1e-9
    assert np.all(np.abs(mf - 100) <= 2.0)
    assert np.all(np.abs(arv - 2 / np.pi) < 1e-3)
    assert elapsed < 5


@pytest.fixture(scope="module")
def desk_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    config = desk_config(root)
    pipeline.cmd_synth(config)
    counts = pipeline.cmd_prepare(config)
    return root, config, counts


@pytest.mark.criterion(7, "baselines on surrogates at -10 dB")
def test_criterion_07_baselines(request, desk_split):
    root, _, counts = desk_split
    start = time.perf_counter()
    split = pipeline.load_split(root / "test")
    assert counts["test"] == 100 and set(split.target_snrs) == {-10.0}
    gains = {}
    for name, fn in (("hp", hp_denoise), ("ts", ts_denoise)):
        gains[name] = float(np.mean([snr_improvement(c, n, fn(n)) for c, n in zip(split.clean, split.noisy)]))
    period, pulse = 1000, np.hanning(81) * np.sign(np.linspace(-1, 1, 81))
    train = np.zeros(10 * period)
    for k in range(10):
        train[500 + k * period - 40 : 500 + k * period + 41] += pulse
    residual = ts_subtract(Waveform(train, 1000))
    removed = 1 - np.sum(residual**2) / np.sum(train**2)
    elapsed = time.perf_counter() - start
    note(request, f"SNR_imp hp {gains['hp']:.2f} dB, ts {gains['ts']:.2f} dB; "
                  f"template energy removed {100 * removed:.3f}%; {elapsed:.1f}s")
    assert gains["hp"] > 0 and gains["ts"] > 0
    assert removed >= 0.99
    assert elapsed < 60


@pytest.fixture(scope="module")
def desk_run(desk_split):
    root, config, _ = desk_split
    start = time.perf_counter()
    result = pipeline.cmd_train(config)
    train_s = time.perf_counter() - start
    for method in ("sdemg", "hp", "ts"):
        pipeline.cmd_denoise(config.paths.checkpoint, root / "test/noisy.seg", root / f"out/{method}.seg",
                             seed=config.seed, method=method)
    rows = pipeline.cmd_evaluate(root / "test", {m: root / f"out/{m}.seg" for m in ("sdemg", "hp", "ts")},
                                 root / "report")
    table = {e["method"]: e for e in pipeline.aggregate(rows) if e["input_snr_db"] == "all"}
    return root, config, result, train_s, table


@pytest.mark.criterion(8, "desk-scale end-to-end")
def test_criterion_08_desk_end_to_end(request, desk_run):
    _, _, result, train_s, table = desk_run
    sd, ident = table["sdemg"], table["identity"]
    note(request, f"SNR_imp {sd['snr_imp_db']:.2f} dB, RMSE {sd['rmse']:.4f} vs identity {ident['rmse']:.4f}; "
                  f"val loss {result.initial_val_loss:.3f} -> {result.best_val_loss:.4f}; training {train_s:.0f}s")
    assert sd["n"] == 100
    assert sd["snr_imp_db"] >= 3.0
    assert sd["rmse"] < ident["rmse"]
    assert result.best_val_loss <= 0.5 * result.initial_val_loss
    assert train_s <= 30 * 60


@pytest.mark.criterion(9, "determinism of training, denoising and evaluation")
def test_criterion_09_determinism(request, desk_run, tmp_path):
    root, config, result, _, _ = desk_run
    for method in ("sdemg", "hp", "ts"):
        pipeline.cmd_denoise(config.paths.checkpoint, root / "test/noisy.seg", tmp_path / f"{method}.seg",
                             seed=config.seed, method=method)
        assert (tmp_path / f"{method}.seg").read_bytes() == (root / f"out/{method}.seg").read_bytes()
    pipeline.cmd_evaluate(root / "test", {m: tmp_path / f"{m}.seg" for m in ("sdemg", "hp", "ts")}, tmp_path)
    for name in ("results.csv", "aggregate.csv"):
        with open(tmp_path / name) as a, open(root / "report" / name) as b:
            assert list(csv.reader(a)) == list(csv.reader(b))
        assert (tmp_path / name).read_bytes() == (root / "report" / name).read_bytes()

    again = pipeline.cmd_train(load_config(None, "desk", {
        "snr_grid_test": "-10",
        "paths.train_dir": config.paths.train_dir,
        "paths.val_dir": config.paths.val_dir,
        "paths.checkpoint": str(tmp_path / "again.ckpt"),
        "paths.report": str(tmp_path / "again"),
    }))
    diff = abs(again.final_train_loss - result.final_train_loss)
    note(request, f"reports identical; final train loss {result.final_train_loss:.6f} vs "
                  f"{again.final_train_loss:.6f} (diff {diff:.1e})")
    assert diff < 1e-4


@pytest.mark.criterion(10, "format-212 decode fixtures")
def test_criterion_10_wfdb(request):
    fixtures = {
        bytes([0x10, 0x20, 0x03]): [16, 515],
        bytes([0xFF, 0xFF, 0xFF]): [-1, -1],
        bytes([0xFF, 0x07, 0x00]): [2047, 0],
        bytes([0x00, 0x88, 0x00]): [-2048, -2048],
        bytes([0x34, 0x12, 0x56, 0x01, 0xF0, 0x80]): [0x234, 0x156, 1, -128],
    }
    got = {k: list(decode_212(k, len(v))) for k, v in fixtures.items()}
    note(request, f"{len(fixtures)} fixtures")
    assert got == fixtures
