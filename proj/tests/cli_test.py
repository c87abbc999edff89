"""End-to-end checks of the mrvi command line: exit codes, artifacts, schema."""
import csv
import filecmp
import json
import os
import shutil
import subprocess
import sys
import tempfile

import jsonschema

BIN, SRC = sys.argv[1], sys.argv[2]
failures = []


def run(*args, env=None, expect=0):
    full_env = dict(os.environ)
    full_env.pop("MRVI_THREADS", None)
    if env:
        full_env.update(env)
    p = subprocess.run([BIN, *args], capture_output=True, text=True, env=full_env)
    if p.returncode != expect:
        failures.append(f"{' '.join(args)}: exit {p.returncode}, expected {expect}\n{p.stdout}\n{p.stderr}")
    return p


def check(cond, what):
    if not cond:
        failures.append(what)


def same_dirs(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_dirs(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


tmp = tempfile.mkdtemp(prefix="mrvi_cli_")
try:
    cfg = {
        "data": {
            "scene": {"height": 16, "width": 16, "radius_min": 2, "radius_max": 6, "blur_sigma": 1.5},
            "raters": [
                {"rater_id": 0, "bias": "erode", "magnitude": 1, "jitter_std": 0.2},
                {"rater_id": 1, "bias": "threshold_shift", "magnitude": 0, "jitter_std": 0.2},
                {"rater_id": 2, "bias": "dilate", "magnitude": 1, "jitter_std": 0.2},
            ],
            "count": 30,
            "seed": 3,
        },
        "model": {"latent_channels": 2, "tau_dim": 3, "hidden": 4},
        "train": {"lr": 0.003, "batch_size": 6, "max_epochs": 2, "seed": 1},
        "generate": {"n_samples": 6, "seed": 2},
    }
    cfg_path = os.path.join(tmp, "cfg.json")
    with open(cfg_path, "w") as f:
        json.dump(cfg, f)
    d = lambda *p: os.path.join(tmp, *p)

    # gradcheck
    p = run("gradcheck", "--trials", "2")
    ops = [ln.split()[0] for ln in p.stdout.splitlines()[:-1]]
    check(len(ops) > 40 and len(ops) == len(set(ops)), "gradcheck lists every op once")
    p = run("gradcheck", "--trials", "2", "--corrupt", "sigmoid", expect=1)
    check("sigmoid" in p.stdout + p.stderr, "corrupted op is named")

    # configuration and I/O errors
    bad = dict(cfg, bogus=1)
    with open(d("bad.json"), "w") as f:
        json.dump(bad, f)
    run("synth", "--config", d("bad.json"), "--out", d("x"), expect=2)
    run("synth", "--config", d("missing.json"), "--out", d("x"), expect=3)
    run("synth", "--config", cfg_path, "--out", d("x"), env={"MRVI_THREADS": "lots"}, expect=2)
    run("frobnicate", expect=2)

    # synth: split sizes, determinism, refusal to clobber
    run("synth", "--config", cfg_path, "--out", d("data"))
    run("synth", "--config", cfg_path, "--out", d("data2"))
    check(same_dirs(d("data"), d("data2")), "synth output is byte identical")
    sizes = [json.load(open(d("data", s, "manifest.json")))["sample_count"] for s in ("train", "val", "test")]
    check(sizes == [19, 5, 6], f"split sizes {sizes}")
    run("synth", "--config", cfg_path, "--out", d("data"), expect=3)
    run("synth", "--config", cfg_path, "--out", d("data"), "--force")
    check(same_dirs(d("data"), d("data2")), "forced rerun is identical")

    # train
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("run"))
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("run2"), env={"MRVI_THREADS": "3"})
    for name in ("checkpoint.bin", "last.bin", "history.csv"):
        check(filecmp.cmp(d("run", name), d("run2", name), shallow=False), f"{name} identical across thread counts")
    rows = list(csv.DictReader(open(d("run", "history.csv"))))
    check(len(rows) == 2, "history has one row per epoch")
    for r in rows:
        parts = sum(float(r[k]) for k in ("recon", "class", "seg", "kl_z", "kl_tau"))
        check(abs(parts - float(r["total"])) < 1e-9, "history total equals component sum")

    # resume: 1 epoch then resume to 2 equals the 2-epoch run
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("part"), "--epochs", "1")
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("part"), "--epochs", "2", "--resume",
        d("part"), "--force")
    check(filecmp.cmp(d("part", "last.bin"), d("run", "last.bin"), shallow=False), "resumed run matches")

    # ablations drop their terms
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("notau"), "--no-tau")
    for r in csv.DictReader(open(d("notau", "history.csv"))):
        check(float(r["class"]) == 0.0 and float(r["kl_tau"]) == 0.0, "--no-tau drops class and kl_tau")
    run("train", "--config", cfg_path, "--data", d("data"), "--out", d("noz"), "--no-z")
    for r in csv.DictReader(open(d("noz", "history.csv"))):
        check(float(r["kl_z"]) == 0.0, "--no-z drops kl_z")

    # eval
    schema = json.load(open(os.path.join(SRC, "schemas", "metrics.schema.json")))
    ck = d("run", "checkpoint.bin")
    run("eval", "--config", cfg_path, "--checkpoint", ck, "--data", d("data"), "--out", d("ev_p"), "--dump")
    run("eval", "--config", cfg_path, "--checkpoint", ck, "--data", d("data"), "--out", d("ev_p2"))
    run("eval", "--config", cfg_path, "--checkpoint", ck, "--data", d("data"), "--out", d("ev_q"), "--mode", "prior")
    check(filecmp.cmp(d("ev_p", "metrics.json"), d("ev_p2", "metrics.json"), shallow=False),
          "metrics.json is reproducible")
    for ev in ("ev_p", "ev_q"):
        try:
            jsonschema.validate(json.load(open(d(ev, "metrics.json"))), schema)
        except jsonschema.ValidationError as e:
            failures.append(f"{ev}/metrics.json fails the schema: {e.message}")
    pers = json.load(open(d("ev_p", "metrics.json")))
    check(all(v is not None for v in pers["metrics"]["d_per_expert"]), "personalized emits per-expert Dice")
    head, vals = open(d("ev_q", "metrics.csv")).read().splitlines()
    check(head.split(",")[7:10] == ["d_A0", "d_A1", "d_A2"], "csv per-expert columns")
    check(vals.split(",")[7:11] == ["N/A"] * 4, "prior mode per-expert columns are N/A")
    check(os.path.exists(d("ev_p", "predictions", "img_0", "pred_5.u8")), "dump writes predictions")
    run("eval", "--config", cfg_path, "--checkpoint", d("nope.bin"), "--data", d("data"), "--out", d("ev_x"),
        expect=3)
    shutil.copy(ck, d("trunc.bin"))
    with open(d("trunc.bin"), "r+b") as f:
        f.truncate(os.path.getsize(ck) // 2)
    run("eval", "--config", cfg_path, "--checkpoint", d("trunc.bin"), "--data", d("data"), "--out", d("ev_t"),
        expect=3)
    other = json.loads(json.dumps(cfg))
    other["model"]["hidden"] = 5
    with open(d("other.json"), "w") as f:
        json.dump(other, f)
    run("eval", "--config", d("other.json"), "--checkpoint", ck, "--data", d("data"), "--out", d("ev_o"), expect=2)
    run("eval", "--config", cfg_path, "--checkpoint", ck, "--data", d("data"), "--out", d("ev_n"),
        "--n-samples", "2", expect=2)

    # baselines
    run("baseline", "--config", cfg_path, "--data", d("data"), "--out", d("mv"), "--majority")
    run("baseline", "--config", cfg_path, "--data", d("data"), "--out", d("r2"), "--rater", "2")
    run("baseline", "--config", cfg_path, "--data", d("data"), "--out", d("r9"), "--rater", "9", expect=2)
    mv = json.load(open(d("mv", "metrics.json")))
    jsonschema.validate(mv, schema)
    check(mv["metrics"]["d_pp"] == 0.0, "deterministic baseline has no spread")
finally:
    shutil.rmtree(tmp, ignore_errors=True)

for f in failures:
    print("FAIL:", f)
print("cli checks:", "FAIL" if failures else "PASS")
sys.exit(1 if failures else 0)
