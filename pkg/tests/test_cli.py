import hashlib
import subprocess
import sys

import numpy as np
import pytest

from submom import recon, store
from submom.cli import ConfigError, load_config, main, validate

CONFIG = """
[grid]
m = 8

[volume]
L = 2
n_blobs = 4

[density]
P = 2

[simulate]
N = 300
sigma2 = 0.0
seed = 4

[sketch]
s = 40

[optimizer]
maxiter = 300
"""


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.toml"
    cfg.write_text(CONFIG)
    base = ["--config", str(cfg), "--deterministic"]
    assert main(["simulate", *base, "--out", str(d / "stack.smom")]) == 0
    assert main(["sketch", *base, "--stack", str(d / "stack.smom"), "--out", str(d / "mom.smom")]) == 0
    assert main(["reconstruct", *base, "--moments", str(d / "mom.smom"), "--out", str(d / "est.smom")]) == 0
    return d, base


def test_pipeline_outputs(run):
    d, base = run
    for name in ("stack.smom", "stack.truth.smom", "mom.smom", "est.smom"):
        assert (d / name).exists()
    for k in (1, 2, 3):
        assert (d / "est.smom.ckpt" / f"stage{k}.smom").exists()
    params, recs, _ = store.load_params(d / "est.smom")
    assert [r.stage for r in recs] == [1, 2, 3]
    # entering stage k the previously matched terms are no worse than they were left
    for prev, cur in zip(recs, recs[1:]):
        assert cur.entry_matched <= prev.final_cost * (1 + 1e-9) + 1e-15
    _, _, rots, _ = store.load_truth(d / "stack.truth.smom")
    assert rots.shape == (300, 3)


def test_simulate_and_sketch_deterministic(run, tmp_path):
    d, base = run
    assert main(["simulate", *base, "--out", str(tmp_path / "s.smom")]) == 0
    assert sha(tmp_path / "s.smom") == sha(d / "stack.smom")
    assert main(["sketch", *base, "--stack", str(d / "stack.smom"), "--out", str(tmp_path / "m.smom")]) == 0
    assert sha(tmp_path / "m.smom") == sha(d / "mom.smom")


def test_sketch_prints_ranks_and_path(run, tmp_path, capsys, caplog):
    d, base = run
    caplog.set_level("INFO")
    main(["sketch", *base, "--stack", str(d / "stack.smom"), "--out", str(tmp_path / "m.smom")])
    out = capsys.readouterr().out
    assert "ranks r1=" in out and "probe E2=" in out
    assert "sketch path: gaussian" in caplog.text


def test_ctf_stack_uses_cur(run, tmp_path, caplog):
    d, base = run
    caplog.set_level("INFO")
    st = ["--set", "ctf.n_groups=2", "--set", "simulate.N=100"]
    assert main(["simulate", *base, *st, "--out", str(tmp_path / "c.smom")]) == 0
    assert main(["sketch", *base, "--stack", str(tmp_path / "c.smom"), "--out", str(tmp_path / "m.smom")]) == 0
    assert "sketch path: cur" in caplog.text
    assert store.load_moments(tmp_path / "m.smom").meta["path"] == "cur"


def test_reconstruct_deterministic_and_resume(run, tmp_path, capsys):
    d, base = run
    out = tmp_path / "e.smom"
    ck = tmp_path / "ck"
    assert main(["reconstruct", *base, "--moments", str(d / "mom.smom"), "--out", str(out),
                 "--checkpoint-dir", str(ck)]) == 0
    assert sha(out) == sha(d / "est.smom")
    # drop the last stage, resume: only stage 3 runs and the result is unchanged
    (ck / "stage3.smom").unlink()
    capsys.readouterr()
    out2 = tmp_path / "e2.smom"
    assert main(["reconstruct", *base, "--moments", str(d / "mom.smom"), "--out", str(out2),
                 "--checkpoint-dir", str(ck), "--resume"]) == 0
    a, _, _ = store.load_params(out)
    b, recs, _ = store.load_params(out2)
    assert np.array_equal(a.at, b.at) and np.array_equal(a.bt, b.bt)
    assert [r.stage for r in recs] == [1, 2, 3]
    printed = capsys.readouterr().out
    assert "stage 3:" in printed


def test_evaluate_truth_against_itself(run, tmp_path):
    d, base = run
    vc, dc, _, _ = store.load_truth(d / "stack.truth.smom")
    store.save_params(tmp_path / "p.smom", recon.RealParams.from_coeffs(vc, dc))
    rep = tmp_path / "r.txt"
    assert main(["evaluate", *base, "--params", str(tmp_path / "p.smom"), "--truth",
                 str(d / "stack.truth.smom"), "--out", str(rep)]) == 0
    text = rep.read_text()
    assert "resolution (cutoff 0.5): 2.0000" in text
    derr = float(text.split("density_relative_l2_error:")[1].split()[0])
    assert derr < 1e-12
    assert "fsc_at_nyquist: 1.000000" in text


def test_evaluate_byte_stable_and_cutoff(run, tmp_path):
    d, base = run
    args = ["evaluate", *base, "--params", str(d / "est.smom"), "--truth", str(d / "stack.truth.smom")]
    assert main([*args, "--out", str(tmp_path / "a.txt")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.txt")]) == 0
    assert main([*args, "--out", str(tmp_path / "c.txt"), "--cutoff", str(1 / 7)]) == 0
    a = (tmp_path / "a.txt").read_bytes()
    assert a == (tmp_path / "b.txt").read_bytes()
    la, lc = a.decode().splitlines(), (tmp_path / "c.txt").read_text().splitlines()
    diff = [i for i, (x, y) in enumerate(zip(la, lc)) if x != y]
    assert len(la) == len(lc) and len(diff) == 1
    assert la[diff[0]].startswith("resolution") and lc[diff[0]].startswith("resolution")


def test_evaluate_writes_volume(run, tmp_path):
    d, base = run
    assert main(["evaluate", *base, "--params", str(d / "est.smom"), "--truth", str(d / "stack.truth.smom"),
                 "--out", str(tmp_path / "r.txt"), "--volume-out", str(tmp_path / "v.smom")]) == 0
    assert store.load_volume(tmp_path / "v.smom").n == 8


def test_quadrature_check(tmp_path, capsys):
    assert main(["quadrature-check", "--order", "4", "--out", str(tmp_path / "r.smom")]) == 0
    out = capsys.readouterr().out
    assert "# worst" in out and len([l for l in out.splitlines() if not l.startswith("#")]) == 5
    assert store.load_rule(tmp_path / "r.smom").order == 4


# exit codes ------------------------------------------------------------------

def test_exit_2_missing_key_and_bad_values(tmp_path, caplog):
    assert main(["simulate", "--set", "grid.m=8", "--set", "volume.L=1", "--out", str(tmp_path / "x")]) == 2
    assert "missing config key" in caplog.text
    assert main(["simulate", "--set", "grid.m=7", "--out", str(tmp_path / "x")]) == 2
    assert main(["simulate", "--set", "nosuch.key=1", "--out", str(tmp_path / "x")]) == 2


def test_exit_2_negative_density(run, tmp_path, caplog):
    d, base = run
    code = main(["simulate", *base, "--set", "density.b_real=[0.0, 0.0, 3.0, 0.0, 0.0]",
                 "--out", str(tmp_path / "x.smom")])
    assert code == 2 and "negative" in caplog.text.lower()


def test_exit_3_checksum(run, tmp_path):
    d, base = run
    raw = bytearray((d / "stack.smom").read_bytes())
    raw[300] ^= 0x01
    (tmp_path / "bad.smom").write_bytes(bytes(raw))
    assert main(["sketch", *base, "--stack", str(tmp_path / "bad.smom"), "--out", str(tmp_path / "m")]) == 3


def test_exit_4_keeps_last_checkpoint(run, tmp_path, monkeypatch):
    d, base = run
    real = recon.solve_stage

    def failing(stage, *a, **k):
        p, rec = real(stage, *a, **k)
        if stage == 2:
            rec.status, rec.message = 6, "forced failure"
        return p, rec

    monkeypatch.setattr(recon, "solve_stage", failing)
    ck = tmp_path / "ck"
    assert main(["reconstruct", *base, "--moments", str(d / "mom.smom"), "--out", str(tmp_path / "e.smom"),
                 "--checkpoint-dir", str(ck)]) == 4
    assert (ck / "stage1.smom").exists() and not (ck / "stage2.smom").exists()
    assert not (tmp_path / "e.smom").exists()


def test_exit_5_grid_mismatch(run, tmp_path):
    d, base = run
    assert main(["reconstruct", *base, "--set", "grid.m=10", "--moments", str(d / "mom.smom"),
                 "--out", str(tmp_path / "e.smom")]) == 5
    assert main(["evaluate", *base, "--set", "grid.m=10", "--params", str(d / "est.smom"),
                 "--truth", str(d / "stack.truth.smom")]) == 5


# configuration ---------------------------------------------------------------

def test_config_layers(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"grid": {"m": 16}, "volume": {"L": 3}}')
    cfg = load_config(p, ["volume.L=4", "sketch.tau2=1e-6", "optimizer.cost_scale=[1, 10, 100]"])
    assert cfg["grid"]["m"] == 16 and cfg["volume"]["L"] == 4 and cfg["sketch"]["tau2"] == 1e-6
    validate(cfg)
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "submom", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "sketch", "reconstruct", "evaluate", "quadrature-check"):
        assert cmd in r.stdout
