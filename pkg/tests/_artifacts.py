"""Build and cache the heavy acceptance-test artifacts.

The acceptance suite needs a trained model, which takes well over an
hour on one core. Everything deterministic and expensive lives under
.cache/, keyed by a hash of the generating parameters: rendered
datasets, the main 20k-iteration run with its periodic checkpoints, and
a reconstruction-only run used by the degenerate-training comparison.

Run directly (python3 tests/_artifacts.py) to prebuild; the test suite
calls ensure(), which reuses finished stages, waits on a live builder
from another process, or builds in-process as a last resort.
"""

import hashlib
import json
import os
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".cache"

KEY = {
    "version": 1,
    "train_sets": 200,
    "train_seed": 100,
    "heldout_sets": 50,
    "heldout_seed": 200,
    "gazes_per_set": 10,
    "model_seed": 0,
    "iterations": 20000,
    "collapse_iterations": 2000,
    "batch_size": 16,
    "train_config_seed": 0,
}


def key_hash() -> str:
    return hashlib.sha256(json.dumps(KEY, sort_keys=True).encode()).hexdigest()[:16]


class Paths:
    data_train = CACHE / "data" / "train"
    data_heldout = CACHE / "data" / "heldout"
    run = CACHE / "run"
    collapse = CACHE / "collapse"
    meta = CACHE / "meta.json"
    lock = CACHE / "build.lock"

    @staticmethod
    def marker(stage: str) -> Path:
        return CACHE / f".done-{stage}"


STAGES = ("data_train", "data_heldout", "run", "collapse")


def _stage_done(stage: str) -> bool:
    return Paths.marker(stage).exists()


def complete() -> bool:
    if not Paths.meta.exists():
        return False
    try:
        meta = json.loads(Paths.meta.read_text())
    except json.JSONDecodeError:
        return False
    if meta.get("key") != key_hash():
        return False
    return all(_stage_done(s) for s in STAGES)


def _log(msg: str) -> None:
    print(f"[artifacts {time.strftime('%H:%M:%S')}] {msg}", flush=True)


def _build_data(path: Path, n_sets: int, seed: int) -> None:
    from ecc.synthdata import RenderConfig, write_dataset

    path.mkdir(parents=True, exist_ok=True)
    write_dataset(path, n_sets, seed=seed, cfg=RenderConfig(gazes_per_set=KEY["gazes_per_set"]))


def _train_run(out: Path, correction_w: float, reconstruction_w: float, iterations: int) -> None:
    from ecc.kernels import warmup
    from ecc.model import EccNet
    from ecc.synthdata import load_dataset
    from ecc.training import TrainConfig, train

    warmup()
    out.mkdir(parents=True, exist_ok=True)
    sets = load_dataset(Paths.data_train)
    cfg = TrainConfig(
        iterations=iterations,
        batch_size=KEY["batch_size"],
        seed=KEY["train_config_seed"],
        correction_weight=correction_w,
        reconstruction_weight=reconstruction_w,
    )
    model = EccNet(seed=KEY["model_seed"])
    t0 = time.time()
    progress = out / "progress.log"

    def on_report(r):
        line = (
            f"iter {r.iteration:6d} lr {r.lr:.5f} loss {r.loss:.6f} "
            f"corr {r.correction:.6f} recon {r.reconstruction:.6f} "
            f"elapsed {time.time() - t0:7.0f}s"
        )
        with open(progress, "a") as f:
            f.write(line + "\n")

    history = train(model, sets, cfg, out_dir=str(out), on_report=on_report)
    (out / "history.json").write_text(
        json.dumps([r.as_dict() for r in history]) + "\n"
    )


def build(stages=STAGES) -> None:
    CACHE.mkdir(exist_ok=True)
    if Paths.meta.exists():
        try:
            old = json.loads(Paths.meta.read_text()).get("key")
        except json.JSONDecodeError:
            old = None
        if old != key_hash():
            _log("cache key changed, clearing old markers")
            for s in STAGES:
                Paths.marker(s).unlink(missing_ok=True)
    Paths.meta.write_text(json.dumps({"key": key_hash(), "params": KEY}) + "\n")

    if "data_train" in stages and not _stage_done("data_train"):
        _log(f"rendering {KEY['train_sets']} training sets")
        _build_data(Paths.data_train, KEY["train_sets"], KEY["train_seed"])
        Paths.marker("data_train").touch()
    if "data_heldout" in stages and not _stage_done("data_heldout"):
        _log(f"rendering {KEY['heldout_sets']} held-out sets")
        _build_data(Paths.data_heldout, KEY["heldout_sets"], KEY["heldout_seed"])
        Paths.marker("data_heldout").touch()
    if "run" in stages and not _stage_done("run"):
        _log(f"main training run: {KEY['iterations']} iterations")
        _train_run(Paths.run, 0.8, 0.2, KEY["iterations"])
        Paths.marker("run").touch()
        _log("main run finished")
    if "collapse" in stages and not _stage_done("collapse"):
        _log(f"reconstruction-only run: {KEY['collapse_iterations']} iterations")
        _train_run(Paths.collapse, 0.0, 1.0, KEY["collapse_iterations"])
        Paths.marker("collapse").touch()
        _log("reconstruction-only run finished")


def _lock_alive() -> bool:
    try:
        pid = int(Paths.lock.read_text().strip())
    except (OSError, ValueError):
        return False
    try:
        os.kill(pid, 0)
    except (ProcessLookupError, PermissionError):
        return False
    return True


def ensure(poll_seconds: int = 20) -> None:
    """Make sure all artifacts exist, waiting on a concurrent builder."""
    if complete():
        return
    while _lock_alive():
        done = [s for s in STAGES if _stage_done(s)]
        _log(f"waiting on builder pid file; stages done: {done or 'none'}")
        time.sleep(poll_seconds)
        if complete():
            return
    if complete():
        return
    CACHE.mkdir(exist_ok=True)
    Paths.lock.write_text(str(os.getpid()))
    try:
        build()
    finally:
        Paths.lock.unlink(missing_ok=True)
    if not complete():
        raise RuntimeError("artifact build finished but artifacts are incomplete")


if __name__ == "__main__":
    CACHE.mkdir(exist_ok=True)
    if _lock_alive():
        print("another builder is already running", file=sys.stderr)
        sys.exit(1)
    Paths.lock.write_text(str(os.getpid()))
    try:
        build()
    finally:
        Paths.lock.unlink(missing_ok=True)
    _log("all artifacts ready")
