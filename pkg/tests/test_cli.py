import json

import numpy as np
import pytest

from mxml import numeric as nm
from mxml.cli import main
from mxml.dataio import load_corpus
from mxml.model import ModelParams, load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "corpus"), "--n-videos", "6", "--clips", "12", "--d-v", "8",
                 "--d-t", "8", "--queries-per-video", "2", "--all-train", "--seed", "1"]) == 0
    assert main(["train", "--corpus", str(root / "corpus"), "--out", str(root / "run"), "--epochs", "3",
                 "--d", "8", "--batch-size", "4", "--lr", "1e-3", "--val-split", "train",
                 "--set", "train.warmup_epochs=1", "--set", "model.l_max=12", "--set", "model.lq_max=6"]) == 0
    return root


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "train")[0] == 1
    assert run(capsys)[0] == 1


def test_train_writes_artifacts(work):
    run_dir = work / "run"
    log = [json.loads(l) for l in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1, 2]
    params, extra = load_checkpoint(run_dir / "checkpoint.mxml")
    assert isinstance(params, ModelParams) and params.config.d == 8
    assert extra["train"]["lr"] == 1e-3 and 0 <= extra["best_epoch"] <= 2
    assert "train.warmup_epochs = 1.0" in (run_dir / "config.txt").read_text()


def test_train_same_seed_same_log(work, tmp_path):
    argv = ["train", "--corpus", work / "corpus", "--out", tmp_path, "--epochs", "3", "--d", "8", "--batch-size", "4",
            "--lr", "1e-3", "--val-split", "train", "--set", "train.warmup_epochs=1", "--set", "model.l_max=12",
            "--set", "model.lq_max=6"]
    assert main([str(a) for a in argv]) == 0
    assert (tmp_path / "train_log.jsonl").read_bytes() == (work / "run" / "train_log.jsonl").read_bytes()
    assert (tmp_path / "checkpoint.mxml").read_bytes() == (work / "run" / "checkpoint.mxml").read_bytes()


def test_train_config_errors(work, tmp_path, capsys):
    assert run(capsys, "train", "--corpus", work / "corpus", "--out", tmp_path, "--set", "model.bogus=1")[0] == 1
    assert run(capsys, "train", "--corpus", work / "corpus", "--out", tmp_path, "--epochs", "2")[0] == 1
    assert run(capsys, "train", "--corpus", tmp_path / "none", "--out", tmp_path)[0] == 2


def test_train_reads_config_file(work, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model.d = 4\nmodel.n_heads = 2\nmodel.l_max = 12\nmodel.lq_max = 6\n"
                   "train.max_epochs = 1\ntrain.warmup_epochs = 0\n")
    code, _, _ = run(capsys, "train", "--corpus", work / "corpus", "--out", tmp_path / "o", "--config", cfg,
                     "--val-split", "none")
    assert code == 0
    assert load_checkpoint(tmp_path / "o" / "checkpoint.mxml")[0].config.d == 4


def test_retrieve_dump_contract(work, capsys):
    dump = work / "k1.jsonl"
    code, _, err = run(capsys, "retrieve", "--checkpoint", work / "run" / "checkpoint.mxml",
                       "--corpus", work / "corpus", "--k", "1", "--out", dump)
    assert code == 0
    events = [json.loads(l) for l in err.splitlines()]
    done = [e for e in events if e["event"] == "retrieved"][0]
    assert done["queries"] == 24 and "queries_per_s" in done and "wall_s" in done
    rows = [json.loads(l) for l in dump.read_text().splitlines()]
    assert len(rows) == 24 and all(len(r["predictions"]) == 1 for r in rows)
    for r in rows:
        for _, s, e, _ in r["predictions"]:
            assert (s / 1.5).is_integer() and (e / 1.5).is_integer() and e > s
    again = work / "k1b.jsonl"
    run(capsys, "retrieve", "--checkpoint", work / "run" / "checkpoint.mxml", "--corpus", work / "corpus",
        "--k", "1", "--out", again)
    assert again.read_bytes() == dump.read_bytes()


def test_retrieve_parallel_matches_serial(work, capsys):
    a, b = work / "s.jsonl", work / "p.jsonl"
    base = ["retrieve", "--checkpoint", work / "run" / "checkpoint.mxml", "--corpus", work / "corpus", "--k", "5"]
    assert run(capsys, *base, "--out", a)[0] == 0
    assert run(capsys, *base, "--out", b, "--n-jobs", "3")[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_retrieve_dim_mismatch(work, tmp_path, capsys):
    main(["generate", "--out", str(tmp_path / "c"), "--n-videos", "2", "--clips", "12", "--d-v", "5", "--d-t", "8"])
    code, _, err = run(capsys, "retrieve", "--checkpoint", work / "run" / "checkpoint.mxml", "--corpus",
                       tmp_path / "c", "--out", tmp_path / "d")
    assert code == 1 and "d_v" in err


def test_bad_checkpoint_is_format_error(work, tmp_path, capsys):
    bad = tmp_path / "bad.mxml"
    bad.write_bytes(b"JUNKJUNK")
    assert run(capsys, "retrieve", "--checkpoint", bad, "--corpus", work / "corpus", "--out", tmp_path / "d")[0] == 2


def _write_dump(path, rows):
    path.write_text("".join(json.dumps({"query_id": q, "predictions": p}) + "\n" for q, p in rows.items()))


def test_eval_perfect_and_empty(work, tmp_path, capsys):
    corpus = load_corpus(work / "corpus")
    perfect = {q.query_id: [[q.gt_video_id, q.start, q.end, 1.0]] for q in corpus.queries}
    _write_dump(tmp_path / "p.jsonl", perfect)
    code, out, _ = run(capsys, "eval", "--dump", tmp_path / "p.jsonl", "--corpus", work / "corpus",
                       "--out", tmp_path / "r.json")
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    vals = [v for by_qt in report["recall"].values() for by_k in by_qt.values() for by_i in by_k.values()
            for v in by_i.values()]
    assert vals and all(v == 1.0 for v in vals)
    (tmp_path / "e.jsonl").write_text("")
    code, out, err = run(capsys, "eval", "--dump", tmp_path / "e.jsonl", "--corpus", work / "corpus")
    assert code == 0 and "coverage" in err
    report = json.loads(out.splitlines()[-1])
    assert all(v == 0.0 for by_qt in report["recall"].values() for by_k in by_qt.values()
               for by_i in by_k.values() for v in by_i.values())


def test_eval_six_query_hand_table(tmp_path, capsys):
    main(["generate", "--out", str(tmp_path / "c"), "--n-videos", "3", "--clips", "12", "--d-v", "4", "--d-t", "4",
          "--queries-per-video", "1", "--all-train", "--seed", "5"])
    qs = {q.query_id: q for q in load_corpus(tmp_path / "c").queries}
    en = sorted(k for k in qs if k.endswith(".en"))
    zh = sorted(k for k in qs if k.endswith(".zh"))
    exact = lambda q: [q.gt_video_id, q.start, q.end, 1.0]
    near = lambda q: [q.gt_video_id, q.start, q.end + (q.end - q.start) * 2 / 3, 1.0]   # IoU 0.6
    other = lambda q: ["nowhere", q.start, q.end, 1.0]
    dump = {en[0]: [exact(qs[en[0]])], en[1]: [near(qs[en[1]])], en[2]: [other(qs[en[2]])],
            zh[0]: [exact(qs[zh[0]])], zh[2]: [other(qs[zh[2]]), exact(qs[zh[2]])]}
    _write_dump(tmp_path / "d.jsonl", dump)
    code, out, err = run(capsys, "eval", "--dump", tmp_path / "d.jsonl", "--corpus", tmp_path / "c",
                         "--ks", "1,5", "--ious", "0.5,0.7")
    assert code == 0 and "coverage" in err
    r = json.loads(out.splitlines()[-1])["recall"]
    want = {("en", "R@1", "0.5"): 2 / 3, ("en", "R@1", "0.7"): 1 / 3, ("en", "R@5", "0.5"): 2 / 3,
            ("en", "R@5", "0.7"): 1 / 3, ("zh", "R@1", "0.5"): 1 / 3, ("zh", "R@1", "0.7"): 1 / 3,
            ("zh", "R@5", "0.5"): 2 / 3, ("zh", "R@5", "0.7"): 2 / 3}
    for (lang, k, iou), v in want.items():
        assert r[lang]["all"][k][iou] == v, (lang, k, iou)


def test_eval_malformed_dump(work, tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text('{"query_id": "x", "predictions": []}\nnot json\n')
    code, _, err = run(capsys, "eval", "--dump", tmp_path / "m.jsonl", "--corpus", work / "corpus")
    assert code == 2 and "line 2" in err


def test_compare_null_and_separation(work, tmp_path, capsys):
    corpus = load_corpus(work / "corpus")
    oracle = {q.query_id: [[q.gt_video_id, q.start, q.end, 1.0]] for q in corpus.queries}
    _write_dump(tmp_path / "o.jsonl", oracle)
    _write_dump(tmp_path / "n.jsonl", {q: [] for q in oracle})
    code, out, _ = run(capsys, "compare", "--dump-a", tmp_path / "o.jsonl", "--dump-b", tmp_path / "o.jsonl",
                       "--corpus", work / "corpus", "--B", "2000")
    assert code == 0 and all(v["p_value"] > 0.4 for v in json.loads(out).values())
    code, out, _ = run(capsys, "compare", "--dump-a", tmp_path / "o.jsonl", "--dump-b", tmp_path / "n.jsonl",
                       "--corpus", work / "corpus", "--B", "2000")
    assert code == 0 and all(v["p_value"] < 0.01 for v in json.loads(out).values())


def test_compare_query_set_mismatch(work, tmp_path, capsys):
    _write_dump(tmp_path / "a.jsonl", {"p0000_0.en": [], "p0000_0.zh": []})
    _write_dump(tmp_path / "b.jsonl", {"p0000_0.en": [], "p0001_0.en": []})
    code, _, err = run(capsys, "compare", "--dump-a", tmp_path / "a.jsonl", "--dump-b", tmp_path / "b.jsonl",
                       "--corpus", work / "corpus")
    assert code == 2 and "p0000_0.zh" in err and "p0001_0.en" in err


def test_gradcheck_healthy(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", "0")
    rows = [json.loads(l) for l in out.splitlines()]
    assert code == 0 and all(r["ok"] and r["max_rel_err"] < 1e-4 for r in rows)
    groups = {r["group"] for r in rows}
    assert {"video_proj", "text_proj.en", "text_proj.zh", "pos_embed", "query_encoder", "video_encoder.0",
            "video_encoder.1", "subtitle_encoder.0", "subtitle_encoder.1", "modular_attn", "convse"} <= groups


def test_gradcheck_catches_corrupted_adjoint(capsys, monkeypatch):
    real = nm._conv1d_backward

    def corrupted(g, padded, kernel, l):
        gs, gk = real(g, padded, kernel, l)
        return gs, 1.5 * gk

    monkeypatch.setattr(nm, "_conv1d_backward", corrupted)
    code, out, err = run(capsys, "gradcheck", "--seeds", "0")
    assert code == 3
    bad = {r["group"] for r in map(json.loads, out.splitlines()) if not r["ok"]}
    assert bad == {"convse"}
    assert "convse" in err.splitlines()[-1]
