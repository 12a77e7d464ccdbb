import json

import numpy as np
import pytest
from click.testing import CliRunner

from gaussian_atlas import pipeline
from gaussian_atlas.atlas import load_atlas, load_stats, plane_index_path, save_atlas, to_atlas, plane_offset_index
from gaussian_atlas.cli import cli
from gaussian_atlas.model import load_splat_file, save_cloud, save_ply
from gaussian_atlas.sphere import generate_lattice
from gaussian_atlas.synthetic import random_cloud


def run(*args, ok=(0,)):
    result = CliRunner().invoke(cli, [str(a) for a in args])
    assert result.exit_code in ok, result.output
    return result


def records(result):
    return [json.loads(line) for line in result.stdout.splitlines() if line.startswith("{")]


@pytest.fixture
def clouds(tmp_path):
    paths = []
    for i, n in enumerate((30, 50, 64)):
        path = tmp_path / f"obj{i}.ply"
        save_ply(random_cloud(n, seed=i), path)
        paths.append(path)
    return paths


def test_index_is_idempotent(tmp_path):
    cache = tmp_path / "cache"
    first = records(run("index", "--n", 16, "--cache-dir", cache))[0]
    path = plane_index_path(cache, generate_lattice(16))
    raw = path.read_bytes()
    assert first["reused"] is False and first["rows_checked"] == 16
    assert raw.startswith(b"GIDX1\n") and len(raw.split(b"}", 1)[1]) == 16 * 4
    second = records(run("index", "--n", 16, "--cache-dir", cache))[0]
    assert second["reused"] is True and second["sha256"] == first["sha256"]
    assert path.read_bytes() == raw


def test_index_corrupt_cache_hints_regeneration(tmp_path):
    cache = tmp_path / "cache"
    run("index", "--n", 16, "--cache-dir", cache)
    path = plane_index_path(cache, generate_lattice(16))
    path.write_bytes(b"garbage")
    result = run("index", "--n", 16, "--cache-dir", cache, ok=(1,))
    assert "re-run" in result.output and "delete" in result.output


def test_to_atlas_and_back(tmp_path, clouds):
    cache, out = tmp_path / "cache", tmp_path / "atlases"
    recs = records(run("to-atlas", *clouds, "--out-dir", out, "--n", 64, "--cache-dir", cache, "--previews"))
    assert recs[-1] == {"converted": 3, "failed": 0}
    atlas = load_atlas(out / "obj1.gatl")
    assert atlas.side == 8 and (atlas.channel("opacity_a") > 0).sum() == 50
    assert (out / "previews" / "obj1_albedo.png").exists()
    run("from-atlas", out / "obj1.gatl", "--out", tmp_path / "back.gcld", "--n", 64, "--cache-dir", cache)
    back = load_splat_file(tmp_path / "back.gcld")
    original = load_splat_file(clouds[1])
    key = lambda c: np.lexsort(c.records().T)
    np.testing.assert_allclose(back.records()[key(back)], original.records()[key(original)], atol=1e-5)


def test_batch_failures_are_isolated(tmp_path, clouds):
    (tmp_path / "broken.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    args = [*clouds[:2], tmp_path / "broken.ply", tmp_path / "missing.ply"]
    result = run("to-atlas", *args, "--out-dir", tmp_path / "o", "--n", 64, "--cache-dir", tmp_path / "c",
                 ok=(1, 2))
    recs = records(result)
    assert recs[-1] == {"converted": 2, "failed": 2}
    assert result.exit_code == 2
    assert (tmp_path / "o" / "obj0.gatl").exists()


def test_batch_independent_of_worker_count(tmp_path, clouds):
    outs = {}
    for threads in (1, 2):
        out = tmp_path / f"t{threads}"
        run("to-atlas", *clouds, "--out-dir", out, "--n", 64, "--cache-dir", tmp_path / "c", "--threads", threads)
        outs[threads] = {p.name: p.read_bytes() for p in out.glob("*.gatl")}
    assert outs[1] == outs[2] and len(outs[1]) == 3


def test_large_cloud_is_pruned_before_conversion(tmp_path):
    path = tmp_path / "big.gcld"
    save_cloud(random_cloud(40_000, seed=1), path)
    recs = records(run("to-atlas", path, "--out-dir", tmp_path / "o", "--n", 1024, "--tau", 2048,
                       "--prune-views", 2, "--cache-dir", tmp_path / "c"))
    assert recs[0]["n_input"] == 40_000 and recs[0]["n_kept"] == 1024
    atlas = load_atlas(tmp_path / "o" / "big.gatl")
    assert (atlas.channel("opacity_a") > 0).sum() == 1024


def test_roundtrip_report(tmp_path, clouds):
    report_path = tmp_path / "report.json"
    run("roundtrip", clouds[2], "--n", 64, "--cache-dir", tmp_path / "c", "--views", 4,
        "--resolution", 64, "--report", report_path)
    report = json.loads(report_path.read_text())
    assert report["passed"] and len(report["psnr"]) == 4
    assert report["max_attribute_error"] <= 1e-5
    assert all(p == "inf" or p >= 60 for p in report["psnr"])


def test_roundtrip_contract_failure_exits_3(tmp_path, clouds, monkeypatch):
    monkeypatch.setattr(pipeline, "ROUNDTRIP_MIN_PSNR", float("inf"))
    run("roundtrip", clouds[0], "--n", 64, "--cache-dir", tmp_path / "c", "--views", 2,
        "--resolution", 32, ok=(3,))


def test_render_command(tmp_path, clouds):
    recs = records(run("render", clouds[0], "--out-dir", tmp_path / "r", "--views", 3, "--resolution", 32,
                       "--raw"))
    assert len(recs[0]["images"]) == 3
    assert np.load(tmp_path / "r" / "obj0_view02.npy").shape == (32, 32, 3)


def test_prune_command(tmp_path, clouds):
    recs = records(run("prune", clouds[1], "--out", tmp_path / "p.gcld", "--bound", 20, "--views", 2,
                       "--resolution", 32, "--report-out", tmp_path / "rep.json"))
    assert recs[0]["n_kept"] == 20
    report = json.loads((tmp_path / "rep.json").read_text())
    assert set(report) == {"scores", "views_used", "seed"} and len(report["scores"]) == 50


def test_stats_matches_hand_computation(tmp_path):
    lat = generate_lattice(16)
    plane = plane_offset_index(lat)
    data = []
    for i, n in enumerate((3, 9, 16)):
        atlas, _ = to_atlas(random_cloud(n, seed=i), lat, plane)
        save_atlas(atlas, tmp_path / f"a{i}.gatl")
        data.append(atlas.data.astype(np.float64))
    run("stats", str(tmp_path / "a*.gatl"), "--out", tmp_path / "st", "--histogram", tmp_path / "h.csv",
        "--bins", 4)
    stats = load_stats(tmp_path / "st")
    stack = np.stack(data)
    mean = (stack[0] + stack[1] + stack[2]) / 3
    std = np.sqrt(((stack - mean) ** 2).sum(axis=0) / 3)
    np.testing.assert_allclose(stats.mean, mean, atol=1e-6)
    np.testing.assert_allclose(stats.std, np.maximum(std, 1e-4), atol=1e-6)
    rows = (tmp_path / "h.csv").read_text().splitlines()[1:]
    counts = [int(r.split(",")[2]) for r in rows]
    assert sum(counts) == 3 and counts == [1, 0, 1, 1]


def test_stats_without_matches_fails(tmp_path):
    run("stats", str(tmp_path / "nothing*.gatl"), "--out", tmp_path / "st", ok=(1,))


def test_noise_check(tmp_path):
    lat = generate_lattice(16)
    plane = plane_offset_index(lat)
    for i in range(2):
        save_atlas(to_atlas(random_cloud(10, seed=i), lat, plane)[0], tmp_path / f"a{i}.gatl")
    run("stats", str(tmp_path / "a*.gatl"), "--out", tmp_path / "st")
    rec = records(run("noise-check", tmp_path / "a0.gatl", "--stats", tmp_path / "st", "--steps", 50))[0]
    assert rec["passed"] and rec["max_error"]["x0"] < 1e-6
    run("noise-check", tmp_path / "a0.gatl", ok=(1,))


def test_config_file_defaults_and_flag_precedence(tmp_path):
    cfg = tmp_path / "gatlas.toml"
    cfg.write_text(f'n = 16\ncache_dir = "{tmp_path / "cache"}"\n[index]\ncheck_rows = 4\n')
    rec = records(run("--config", cfg, "index"))[0]
    assert rec["n"] == 16 and rec["rows_checked"] == 4
    rec = records(run("--config", cfg, "index", "--n", 64))[0]
    assert rec["n"] == 64


def test_exit_codes_for_bad_input(tmp_path):
    run("index", "--n", 15, "--cache-dir", tmp_path, ok=(1,))
    run("no-such-command", ok=(1,))
    run("from-atlas", tmp_path / "missing.gatl", "--out", tmp_path / "x.gcld", ok=(2,))
    (tmp_path / "bad.gatl").write_bytes(b"nope")
    run("from-atlas", tmp_path / "bad.gatl", "--out", tmp_path / "x.gcld", ok=(1,))


def test_logs_are_json_lines(tmp_path):
    result = run("index", "--n", 16, "--cache-dir", tmp_path)
    logs = [json.loads(line) for line in result.stderr.splitlines() if line.strip()]
    assert logs and all({"time", "level", "event"} <= set(entry) for entry in logs)
