import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ebmdmo.cli import main  # noqa: E402

SRC_DIR = Path(__file__).parent.parent / "src" / "ebmdmo"


def _source_digest() -> str:
    h = hashlib.blake2b(digest_size=12)
    for path in sorted(SRC_DIR.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()


def run_cli(args: list[str]) -> float:
    """Run a CLI command, asserting success; returns wall time in seconds."""
    t0 = time.perf_counter()
    code = main(args)
    assert code == 0, f"command failed ({code}): {args}"
    return time.perf_counter() - t0


def cached_cli(args: list[str], out_dir: Path) -> float:
    """Run a CLI command whose outputs land in out_dir.

    When EBMDMO_TEST_CACHE is set, results are reused across sessions keyed
    by the command line and the package source digest; the recorded wall
    time of the original run is returned so budget assertions stay honest.
    """
    cache_root = os.environ.get("EBMDMO_TEST_CACHE")
    if not cache_root:
        return run_cli(args)
    key = hashlib.blake2b(
        (json.dumps(args) + _source_digest()).encode(), digest_size=12
    ).hexdigest()
    slot = Path(cache_root) / key
    meta = slot / "wall_time.json"
    if meta.exists():
        shutil.copytree(slot / "out", out_dir, dirs_exist_ok=True)
        return json.loads(meta.read_text())["wall_time"]
    wall = run_cli(args)
    slot.mkdir(parents=True, exist_ok=True)
    shutil.copytree(out_dir, slot / "out", dirs_exist_ok=True)
    meta.write_text(json.dumps({"wall_time": wall}))
    return wall


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def reach_data(work):
    out = work / "reach"
    cached_cli(["gen-data", "--task", "reach", "--train", "200", "--test", "50",
                "--seed", "7", "--out", str(out)], out)
    return out


@pytest.fixture(scope="session")
def pp_data(work):
    out = work / "pick_place"
    cached_cli(["gen-data", "--task", "pick_place", "--train", "200", "--test",
                "50", "--seed", "11", "--out", str(out)], out)
    return out


@pytest.fixture(scope="session")
def reach_vae(work, reach_data):
    out = work / "reach_vae"
    wall = cached_cli(["train-vae", "--data", str(reach_data),
                       "--out", str(out)], out)
    return out / "vae.ckpt", wall


@pytest.fixture(scope="session")
def reach_ebm(work, reach_data, reach_vae):
    out = work / "reach_ebm"
    wall = cached_cli(["train-ebm", "--data", str(reach_data),
                       "--vae", str(reach_vae[0]), "--out", str(out)], out)
    return out / "ebm.ckpt", wall


@pytest.fixture(scope="session")
def reach_dmo(work, reach_data, reach_vae):
    out = work / "reach_dmo"
    wall = cached_cli(["train-dmo", "--data", str(reach_data),
                       "--vae", str(reach_vae[0]), "--out", str(out)], out)
    return out / "dmo.ckpt", wall


@pytest.fixture(scope="session")
def reach_ebm_gap(work, reach_data, reach_vae):
    out = work / "reach_ebm_gap"
    wall = cached_cli(["train-ebm", "--data", str(reach_data),
                       "--vae", str(reach_vae[0]), "--variant", "gap",
                       "--out", str(out)], out)
    return out / "ebm.ckpt", wall


@pytest.fixture(scope="session")
def reach_dmo_gap(work, reach_data, reach_vae):
    out = work / "reach_dmo_gap"
    wall = cached_cli(["train-dmo", "--data", str(reach_data),
                       "--vae", str(reach_vae[0]), "--variant", "gap",
                       "--out", str(out)], out)
    return out / "dmo.ckpt", wall


@pytest.fixture(scope="session")
def reach_ebm_onlyvae(work, reach_data, reach_vae):
    out = work / "reach_ebm_onlyvae"
    wall = cached_cli(["train-ebm", "--data", str(reach_data),
                       "--vae", str(reach_vae[0]), "--k-data", "0",
                       "--k-vae", "8", "--out", str(out)], out)
    return out / "ebm.ckpt", wall


@pytest.fixture(scope="session")
def pp_vae(work, pp_data):
    out = work / "pp_vae"
    wall = cached_cli(["train-vae", "--data", str(pp_data),
                       "--out", str(out)], out)
    return out / "vae.ckpt", wall


@pytest.fixture(scope="session")
def pp_ebm(work, pp_data, pp_vae):
    out = work / "pp_ebm"
    wall = cached_cli(["train-ebm", "--data", str(pp_data),
                       "--vae", str(pp_vae[0]), "--out", str(out)], out)
    return out / "ebm.ckpt", wall


@pytest.fixture(scope="session")
def pp_dmo(work, pp_data, pp_vae):
    out = work / "pp_dmo"
    wall = cached_cli(["train-dmo", "--data", str(pp_data),
                       "--vae", str(pp_vae[0]), "--out", str(out)], out)
    return out / "dmo.ckpt", wall


@pytest.fixture(scope="session")
def pp_dmo_r1(work, pp_data, pp_vae):
    out = work / "pp_dmo_r1"
    wall = cached_cli(["train-dmo", "--data", str(pp_data),
                       "--vae", str(pp_vae[0]), "--r-train", "1",
                       "--out", str(out)], out)
    return out / "dmo.ckpt", wall
