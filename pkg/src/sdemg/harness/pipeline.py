"""Experiment stages behind the CLI subcommands.

On-disk layout produced by the stages::

    corpus/            synth: semg/S###.seg, ecg/E###.seg, manifest.txt
    train|val|test/    prepare: clean.seg, ecg.seg, noisy.seg, pairs.csv, manifest.txt
    model.ckpt         train (best validation loss)
    report/            train_log.csv, results.csv, aggregate.csv, figures
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..baselines import hp_denoise, ts_denoise
from ..diffusion import SamplerConfig, make_batch, sample, training_loss
from ..errors import ConfigError, ContractError, NumericalDivergenceError, SdemgError
from ..ingest import SurrogateSpec, Waveform, gen_surrogate, read_segments, write_segments
from ..metrics import evaluate as evaluate_segment
from ..preprocess import mix_at_snr, prepare_ecg, prepare_semg, segment
from ..schedules import cosine_schedule
from ..score_net import ScoreNet, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_text, device

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METHODS = ("sdemg", "hp", "ts", "identity")
RESULT_HEADER = ["method", "segment_id", "input_snr_db", "snr_imp_db", "rmse", "rmse_arv", "rmse_mf_hz"]


# ------------------------------------------------------------- helpers ----


def write_manifest(path, entries: dict) -> None:
    path = Path(path)
    lines = [f"{k} = {v}" for k, v in entries.items()]
    tmp = path.with_name(path.name + ".part")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key.strip()] = value.strip()
    return out


def item_seed(global_seed: int, item_id: str) -> int:
    """Stable per-item seed, independent of processing order."""
    digest = hashlib.blake2b(f"{global_seed}:{item_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


@dataclass
class Split:
    """A prepared dataset split held in memory."""

    clean: list
    ecg: list
    noisy: list
    rows: list

    @property
    def ids(self):
        return [r["segment_id"] for r in self.rows]

    @property
    def target_snrs(self):
        return [float(r["target_snr_db"]) for r in self.rows]


def load_split(directory) -> Split:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise ConfigError(f"{d}: not a prepared split (missing manifest.txt)")
    with open(d / "pairs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    split = Split(read_segments(d / "clean.seg"), read_segments(d / "ecg.seg"), read_segments(d / "noisy.seg"), rows)
    if not (len(split.clean) == len(split.ecg) == len(split.noisy) == len(rows)):
        raise ContractError(f"{d}: segment files and pairs.csv disagree in count")
    return split


def _stack(waves, dev="cpu"):
    return torch.from_numpy(np.stack([w.samples for w in waves]).astype(np.float32)).to(dev)


# --------------------------------------------------------------- synth ----


def cmd_synth(config: ExperimentConfig, out_dir=None) -> Path:
    """Write a surrogate corpus: one sEMG recording per subject, one ECG record per source."""
    c = config.corpus
    out = Path(out_dir or config.paths.corpus_dir)
    (out / "semg").mkdir(parents=True, exist_ok=True)
    (out / "ecg").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed, 1])
    n_semg = c.semg_train + c.semg_val + c.semg_test
    n_ecg = c.ecg_train + c.ecg_val + c.ecg_test
    manifest = {"seed": config.seed, "semg_count": n_semg, "ecg_count": n_ecg,
                "semg_fs": c.semg_fs, "ecg_fs": c.ecg_fs}
    for k in range(n_semg):
        seed = int(rng.integers(2**31))
        spec = SurrogateSpec("semg", c.semg_record_s, c.semg_fs, seed, semg_band=(20.0, min(450.0, 0.45 * c.semg_fs)))
        name = f"S{k:03d}"
        write_segments(out / "semg" / f"{name}.seg", [gen_surrogate(spec).replace(label=name)])
        manifest[f"semg.{name}"] = f"seed={seed}"
    for k in range(n_ecg):
        seed = int(rng.integers(2**31))
        rate = float(rng.uniform(55.0, 95.0))
        spec = SurrogateSpec("ecg", c.ecg_record_s, c.ecg_fs, seed, ecg_rate_bpm=rate)
        name = f"E{k:03d}"
        write_segments(out / "ecg" / f"{name}.seg", [gen_surrogate(spec).replace(label=name)])
        manifest[f"ecg.{name}"] = f"seed={seed} rate_bpm={rate:.3f}"
    write_manifest(out / "manifest.txt", manifest)
    return out


# ------------------------------------------------------------- prepare ----


def _sources(directory):
    files = sorted(Path(directory).glob("*.seg"))
    return [(f.stem, read_segments(f)[0]) for f in files]


def _split_sources(items, counts, kind):
    need = sum(counts)
    if len(items) < need:
        raise ConfigError(f"need {need} {kind} sources for disjoint splits, corpus has {len(items)}")
    out, pos = {}, 0
    for name, n in zip(SPLITS, counts):
        out[name] = items[pos : pos + n]
        pos += n
    return out


def _write_split(directory, pairs, rows, config, split):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fs = config.fs
    write_segments(d / "clean.seg", [p.clean for p in pairs], fs)
    write_segments(d / "ecg.seg", [p.ecg for p in pairs], fs)
    write_segments(d / "noisy.seg", [p.noisy for p in pairs], fs)
    with open(d / "pairs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["segment_id"])
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(d / "manifest.txt", {
        "split": split,
        "pairs": len(pairs),
        "fs": fs,
        "segment_s": config.segment_s,
        "clean_sources": ",".join(sorted({r["clean_source"] for r in rows})),
        "ecg_sources": ",".join(sorted({r["ecg_source"] for r in rows})),
        "snr_grid": ",".join(str(v) for v in (config.snr_grid_test if split == "test" else config.snr_grid_train)),
        "seed": config.seed,
    })


def cmd_prepare(config: ExperimentConfig, corpus_dir=None) -> dict:
    """Mix clean segments with ECG windows at grid SNRs, keeping sources disjoint across splits."""
    c = config.corpus
    corpus = Path(corpus_dir or config.paths.corpus_dir)
    semg = _split_sources(_sources(corpus / "semg"), (c.semg_train, c.semg_val, c.semg_test), "sEMG")
    ecg = _split_sources(_sources(corpus / "ecg"), (c.ecg_train, c.ecg_val, c.ecg_test), "ECG")
    seg_len = config.segment_len
    dirs = {"train": config.paths.train_dir, "val": config.paths.val_dir, "test": config.paths.test_dir}
    counts = {}
    for k, split in enumerate(SPLITS):
        rng = np.random.default_rng([config.seed, 2, k])
        grid = config.snr_grid_test if split == "test" else config.snr_grid_train
        ecg_pool = [(name, prepare_ecg(w, config.fs)) for name, w in ecg[split]]
        if any(len(w) < seg_len for _, w in ecg_pool):
            raise ConfigError("ECG records are shorter than one segment")
        pairs, rows = [], []
        for name, raw in semg[split]:
            segs = segment(prepare_semg(raw, config.fs), config.segment_s)
            if split == "val" and c.val_segments:
                segs = segs[: c.val_segments]
            for idx, clean in enumerate(segs):
                for _ in range(c.contaminations_per_segment):
                    e_name, e_wave = ecg_pool[int(rng.integers(len(ecg_pool)))]
                    offset = int(rng.integers(len(e_wave) - seg_len + 1))
                    window = Waveform(e_wave.samples[offset : offset + seg_len], config.fs, e_name)
                    snr = float(grid[int(rng.integers(len(grid)))])
                    pair = mix_at_snr(clean, window, snr)
                    seg_id = f"{split}-{len(pairs):05d}"
                    pairs.append(pair)
                    rows.append({
                        "segment_id": seg_id, "clean_source": name, "clean_index": idx,
                        "ecg_source": e_name, "ecg_offset": offset,
                        "target_snr_db": repr(snr), "scale": repr(pair.scale),
                    })
        _write_split(dirs[split], pairs, rows, config, split)
        counts[split] = len(pairs)
    return counts


# --------------------------------------------------------------- train ----


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    checkpoint: Path | None = None

    @property
    def initial_train_loss(self):
        return self.history[0]["train_loss"]

    @property
    def final_train_loss(self):
        return self.history[-1]["train_loss"]

    @property
    def initial_val_loss(self):
        return self.history[0]["val_loss"]


@torch.no_grad()
def dataset_loss(model, x0, x_tilde, sched, seed: int, batch_size: int) -> float:
    """Objective over a whole dataset with a fixed draw of steps and noise."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    dev = next(model.parameters()).device
    for start in range(0, x0.shape[0], batch_size):
        xb, cb = x0[start : start + batch_size].cpu(), x_tilde[start : start + batch_size].cpu()
        batch = make_batch(xb, cb, sched, gen)
        batch.x0, batch.x_tilde, batch.alpha_bar, batch.eps = (
            batch.x0.to(dev), batch.x_tilde.to(dev), batch.alpha_bar.to(dev), batch.eps.to(dev))
        total += float(training_loss(model, batch)) * xb.shape[0]
        count += xb.shape[0]
    model.train(was_training)
    return total / count


def _remix(clean, ecg_raw, grid, rng):
    """Re-pair every clean row with a random interference row at a random grid SNR."""
    n = clean.shape[0]
    j = rng.integers(ecg_raw.shape[0], size=n)
    snr = np.asarray(grid, dtype=np.float64)[rng.integers(len(grid), size=n)]
    e = ecg_raw[j]
    p_clean = np.mean(clean**2, axis=1)
    p_ecg = np.mean(e**2, axis=1)
    scale = np.sqrt(p_clean / (p_ecg * 10.0 ** (snr / 10.0)))
    return clean + scale[:, None] * e


def _checkpoint_meta(config, epoch, val_loss):
    return {"T": config.T, "sched_s": config.sched_s, "sigma_mode": config.sigma_mode, "clip_x0": config.clip_x0,
            "fs": config.fs, "segment_s": config.segment_s, "epoch": epoch, "val_loss": repr(val_loss),
            "val_seed": config.optimizer.seed + 1, "batch_size": config.optimizer.batch_size}


def cmd_train(config: ExperimentConfig, checkpoint=None, log_path=None) -> TrainResult:
    """Minibatch optimization of the noise-prediction objective with best-validation checkpointing."""
    opt_cfg = config.optimizer
    dev = device()
    torch.manual_seed(opt_cfg.seed)
    train, val = load_split(config.paths.train_dir), load_split(config.paths.val_dir)
    if not train.rows or not val.rows:
        raise ConfigError("train and validation splits must be non-empty")
    if len(train.clean[0]) != config.model.segment_len:
        raise ConfigError(f"prepared segments have {len(train.clean[0])} samples, model expects {config.model.segment_len}")

    sched = cosine_schedule(config.T, config.sched_s)
    model = ScoreNet(config.model).to(dev)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.learning_rate)
    gen = torch.Generator().manual_seed(opt_cfg.seed)
    rng = np.random.default_rng(opt_cfg.seed)

    clean_np = np.stack([w.samples for w in train.clean])
    ecg_np = np.stack([w.samples / float(r["scale"]) for w, r in zip(train.ecg, train.rows)])
    x0 = torch.from_numpy(clean_np.astype(np.float32))
    x_tilde = _stack(train.noisy)
    val_x0, val_xt = _stack(val.clean), _stack(val.noisy)
    val_seed = opt_cfg.seed + 1

    ckpt = Path(checkpoint or config.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path or Path(config.paths.report) / "train_log.csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)

    result = TrainResult(checkpoint=ckpt)
    bs = opt_cfg.batch_size
    init_train = dataset_loss(model, x0, x_tilde, sched, val_seed, bs)
    init_val = dataset_loss(model, val_x0, val_xt, sched, val_seed, bs)
    result.history.append({"epoch": 0, "train_loss": init_train, "val_loss": init_val, "seconds": 0.0})
    result.best_val_loss, result.best_epoch = init_val, 0
    save_checkpoint(model, ckpt, _checkpoint_meta(config, 0, init_val))
    _write_log(log_path, result.history)

    model.train()
    for epoch in range(1, opt_cfg.epochs + 1):
        started = time.perf_counter()
        if opt_cfg.remix and epoch > 1:
            x_tilde = torch.from_numpy(_remix(clean_np, ecg_np, config.snr_grid_train, rng).astype(np.float32))
        perm = torch.randperm(x0.shape[0], generator=gen)
        total = 0.0
        for start in range(0, x0.shape[0], bs):
            idx = perm[start : start + bs]
            batch = make_batch(x0[idx], x_tilde[idx], sched, gen)
            batch.x0, batch.x_tilde, batch.alpha_bar, batch.eps = (
                batch.x0.to(dev), batch.x_tilde.to(dev), batch.alpha_bar.to(dev), batch.eps.to(dev))
            try:
                loss = training_loss(model, batch)
            except NumericalDivergenceError:
                loss = torch.tensor(float("nan"))
            if not torch.isfinite(loss):
                _write_log(log_path, result.history)
                raise NumericalDivergenceError(
                    f"non-finite training loss in epoch {epoch}; last good checkpoint kept at {ckpt}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * idx.numel()
        val_loss = dataset_loss(model, val_x0, val_xt, sched, val_seed, bs)
        row = {"epoch": epoch, "train_loss": total / x0.shape[0], "val_loss": val_loss,
               "seconds": time.perf_counter() - started}
        result.history.append(row)
        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            save_checkpoint(model, ckpt, _checkpoint_meta(config, epoch, val_loss))
        _write_log(log_path, result.history)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, row["train_loss"], val_loss, row["seconds"])
    return result


def _write_log(path, history):
    tmp = Path(path).with_name(Path(path).name + ".part")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "seconds"])
        writer.writeheader()
        for row in history:
            writer.writerow({"epoch": row["epoch"], "train_loss": repr(row["train_loss"]),
                             "val_loss": repr(row["val_loss"]), "seconds": f"{row['seconds']:.3f}"})
    tmp.replace(path)


# ------------------------------------------------------------- denoise ----


def denoise_segments(method, segments, checkpoint=None, seed=0, batch_size=16, sigma_mode=None):
    """Apply one method to a list of waveforms.

    Returns ``(outputs, errors)``: outputs hold ``None`` where a segment failed,
    ``errors`` maps segment index to a message.
    """
    outputs, errors = [None] * len(segments), {}
    if method == "identity":
        return [w.replace() for w in segments], errors
    if method in ("hp", "ts"):
        fn = hp_denoise if method == "hp" else ts_denoise
        for k, w in enumerate(segments):
            try:
                outputs[k] = fn(w)
            except SdemgError as exc:
                errors[k] = str(exc)
        return outputs, errors
    if method != "sdemg":
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if checkpoint is None:
        raise ConfigError("the sdemg method needs a checkpoint")

    model, cfg, meta = load_checkpoint(checkpoint, with_meta=True)
    dev = device()
    model.to(dev)
    sched = cosine_schedule(int(meta["T"]), float(meta["sched_s"]))
    clip = float(meta.get("clip_x0", 1.0))
    sampler = SamplerConfig(sched, sigma_mode or meta.get("sigma_mode", "beta_tilde"), seed, clip if clip > 0 else None)
    ok = []
    for k, w in enumerate(segments):
        if len(w) != cfg.segment_len:
            errors[k] = f"segment has {len(w)} samples, model expects {cfg.segment_len}"
        else:
            ok.append(k)
    for start in range(0, len(ok), batch_size):
        idx = ok[start : start + batch_size]
        x_tilde = _stack([segments[k] for k in idx], dev)
        seeds = [item_seed(seed, str(k)) for k in idx]
        try:
            est = sample(model, x_tilde, sampler, seeds=seeds).cpu().numpy().astype(np.float64)
        except NumericalDivergenceError as exc:
            for k in idx:
                errors[k] = str(exc)
            continue
        for row, k in enumerate(idx):
            outputs[k] = segments[k].replace(samples=est[row], label=f"{segments[k].label}|sdemg")
    return outputs, errors


def cmd_denoise(checkpoint, in_path, out_path, seed=0, method="sdemg", batch_size=16, sigma_mode=None):
    """Denoise every segment of ``in_path`` into ``out_path`` plus a sidecar manifest.

    Failed segments are left out of the output and listed in the manifest.
    """
    segments = read_segments(in_path)
    outputs, errors = denoise_segments(method, segments, checkpoint, seed, batch_size, sigma_mode)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fs = segments[0].fs if segments else 1000
    write_segments(out_path, [w for w in outputs if w is not None], fs)
    manifest = {"method": method, "input": str(in_path), "seed": seed, "segments_in": len(segments),
                "segments_out": sum(w is not None for w in outputs)}
    if method == "sdemg":
        manifest["checkpoint"] = str(checkpoint)
    for k, msg in sorted(errors.items()):
        manifest[f"error.{k}"] = msg
    write_manifest(out_path.with_name(out_path.name + ".manifest.txt"), manifest)
    return errors


# ------------------------------------------------------------ evaluate ----


def cmd_evaluate(split_dir, denoised: dict, out_dir) -> list:
    """Score each method's output against the clean references of a prepared split.

    ``denoised`` maps method name to a segment file. The noisy input itself is
    scored as ``identity`` unless given explicitly. Writes ``results.csv`` (one
    row per segment and method) and ``aggregate.csv``.
    """
    split = load_split(split_dir)
    methods = dict(denoised)
    methods.setdefault("identity", str(Path(split_dir) / "noisy.seg"))
    rows = []
    for method, path in methods.items():
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
        outputs = read_segments(path)
        if len(outputs) != len(split.clean):
            raise ContractError(
                f"{path} holds {len(outputs)} segments but {split_dir} holds {len(split.clean)}")
        for k, est in enumerate(outputs):
            m = evaluate_segment(split.clean[k], split.noisy[k], est)
            rows.append({"method": method, "segment_id": split.ids[k], "input_snr_db": split.target_snrs[k],
                         "snr_imp_db": m.snr_imp_db, "rmse": m.rmse, "rmse_arv": m.rmse_arv,
                         "rmse_mf_hz": m.rmse_mf_hz})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "results.csv", rows)
    write_aggregate(out / "aggregate.csv", aggregate(rows))
    return rows


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_HEADER)
        for r in rows:
            writer.writerow([r["method"], r["segment_id"], f"{r['input_snr_db']:g}"]
                            + [repr(float(r[k])) for k in RESULT_HEADER[3:]])


def read_results(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in RESULT_HEADER[2:]:
            r[k] = float(r[k])
    return rows


METRIC_KEYS = ("snr_imp_db", "rmse", "rmse_arv", "rmse_mf_hz")


def aggregate(rows) -> list:
    """Mean per method (``input_snr_db == 'all'``) and per method and input SNR."""
    groups = {}
    for r in rows:
        for bucket in ("all", f"{r['input_snr_db']:g}"):
            groups.setdefault((r["method"], bucket), []).append(r)
    order = {m: i for i, m in enumerate(METHODS)}

    def key(item):
        (method, bucket), _ = item
        return order.get(method, 99), method, bucket != "all", float(bucket) if bucket != "all" else 0.0

    out = []
    for (method, bucket), members in sorted(groups.items(), key=key):
        entry = {"method": method, "input_snr_db": bucket, "n": len(members)}
        for k in METRIC_KEYS:
            entry[k] = float(np.mean([m[k] for m in members]))
        out.append(entry)
    return out


def write_aggregate(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "input_snr_db", "n", *METRIC_KEYS])
        for e in table:
            writer.writerow([e["method"], e["input_snr_db"], e["n"]] + [repr(e[k]) for k in METRIC_KEYS])


def save_config(config, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(config_text(config))
