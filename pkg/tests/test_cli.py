import json

import numpy as np
import pytest

from hgnnrec import cli, data, synthetic, training
from hgnnrec.data import EncodedSample
from hgnnrec.model import Hyper, load_checkpoint, save_checkpoint

DAY = 86400


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "events.csv"
    data.write_interactions(synthetic.recency_corpus(n_users=40, seed=1), path)
    return path


@pytest.fixture
def prepared(tmp_path, corpus, capsys):
    out = tmp_path / "prep"
    assert run(capsys, "prepare", "--data", corpus, "--out", out)[0] == 0
    return out


def test_prepare_counts(tmp_path, capsys):
    path = tmp_path / "events.csv"
    lengths = {"a": 15, "b": 12, "c": 3, "d": 30}
    rows = ["user_id,item_id,timestamp"]
    for user, m in lengths.items():
        rows += [f"{user},i{k % 7},{1000 + 60 * k}" for k in range(m)]
    path.write_text("\n".join(rows) + "\n")
    code, out, _ = run(capsys, "prepare", "--data", path, "--out", tmp_path / "p", "--window", 5)
    assert code == 0
    counts = dict(line.split("\t") for line in out.strip().splitlines())
    assert int(counts["total"]) == sum(max(0, m - 5) for m in lengths.values())
    assert sum(int(counts[k]) for k in ("train", "validation", "test")) == int(counts["total"])
    vocab = data.Vocabulary.load(tmp_path / "p" / "vocab.json")
    assert len(vocab) == 7


@pytest.mark.parametrize(
    "argv",
    [
        ["prepare", "--data", "x.csv", "--out", "o", "--window", "1"],
        ["recommend", "--checkpoint", "c", "--vocab", "v", "--history", "h", "--top", "0"],
        ["evaluate", "--checkpoint", "c", "--samples", "s", "--cutoffs", "5,zero"],
        ["train", "--data", "d"],
        ["bogus"],
    ],
    ids=["window", "top", "cutoffs", "train-without-out", "command"],
)
def test_usage_errors_exit_1(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_unknown_config_key_exits_1(tmp_path, capsys, prepared):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("max_epochs = 1\nlearnig_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--data", prepared, "--out", tmp_path / "m.bin")
    assert code == 1 and "learnig_rate" in err


def test_data_errors_exit_2(tmp_path, capsys, prepared):
    code, _, err = run(capsys, "evaluate", "--checkpoint", tmp_path / "none.bin", "--samples", prepared / "test.tsv")
    assert code == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,item_id,timestamp\nu,i,yesterday\n")
    code, _, err = run(capsys, "prepare", "--data", bad, "--out", tmp_path / "o")
    assert code == 2 and "line 2" in err


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 3, "--dims", "N=5,d=4,H=2,K=2")
    assert code == 0
    assert out.strip().splitlines()[-1].endswith("s") and "PASS" in out
    assert "gat2_Wz" in out


def test_evaluate_hand_built_model(tmp_path, capsys):
    hyper = Hyper(d=2, heads=1, k=1)
    params = training.init_params(20, hyper, 0)
    params.X[:] = np.stack([1 - 0.1 * np.arange(20), np.zeros(20)], axis=1)
    ckpt = tmp_path / "hand.bin"
    save_checkpoint(params, ckpt)
    config = {"t_days": 7.0, "no_gat1": True, "no_gat2": True, "no_timespan": True}
    cli.sidecar_path(ckpt).write_text(json.dumps({"config": config}))
    samples = tmp_path / "s.tsv"
    data.write_samples([EncodedSample(0, (0, 0), (0, 60), 0, 120), EncodedSample(1, (0, 0), (0, 60), 10, 120)], samples)
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpt, "--samples", samples, "--cutoffs", "1,5,10",
                       "--workers", 2)
    assert code == 0
    report = json.loads(out)
    assert report == {"cutoffs": [1, 5, 10], "hit": [0.5] * 3, "rr": [0.5] * 3, "n": 2}


def test_train_recommend_explain(tmp_path, capsys, corpus, prepared):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# small run\nmax_epochs = 3\nbatch_size = 8\nd = 8\nk = 3\nseed = 4\n")
    ckpt = tmp_path / "model.bin"
    adj = tmp_path / "adj.csv"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", prepared, "--out", ckpt, "--d", 6,
                       "--dump-adjacency", adj)
    assert code == 0, out
    params = load_checkpoint(ckpt)
    assert params.hyper.d == 6 and params.hyper.k == 3  # flag beats file
    meta = json.loads(cli.sidecar_path(ckpt).read_text())
    assert meta["config"]["max_epochs"] == 3 and meta["config"]["seed"] == 4
    assert len(cli.log_path(ckpt).read_text().splitlines()) == 1 + 3
    assert adj.read_text().count("\n") > 1

    history = tmp_path / "history.csv"
    vocab = data.Vocabulary.load(prepared / "vocab.json")
    history.write_text("user_id,item_id,timestamp\n"
                       + "".join(f"x,{vocab.items[k]},{1000 + 60 * k}\n" for k in range(4)))
    code, out, _ = run(capsys, "recommend", "--checkpoint", ckpt, "--vocab", prepared / "vocab.json",
                       "--history", history, "--top", 5)
    assert code == 0
    lines = [line.split("\t") for line in out.strip().splitlines()]
    assert [int(r[0]) for r in lines] == [1, 2, 3, 4, 5]
    probs = [float(r[2]) for r in lines]
    assert probs == sorted(probs, reverse=True)
    assert all(r[1] in vocab.item_index for r in lines)

    assign = tmp_path / "assign.csv"
    code, out, _ = run(capsys, "explain", "--checkpoint", ckpt, "--vocab", prepared / "vocab.json",
                       "--samples", prepared / "train.tsv", "--sample-id", 0, "--assignments", assign)
    assert code == 0
    payload = json.loads(out)
    assert len(payload["factors"]) == 3 and len(payload["labels"]) == 12
    assert len(assign.read_text().splitlines()) == 13

    code, _, err = run(capsys, "explain", "--checkpoint", ckpt, "--vocab", prepared / "vocab.json",
                       "--samples", prepared / "train.tsv", "--sample-id", 10**6)
    assert code == 2 and "out of range" in err


def test_recommend_rejects_unknown_items(tmp_path, capsys, prepared):
    params = training.init_params(len(data.Vocabulary.load(prepared / "vocab.json")), Hyper(d=4, heads=2, k=2), 0)
    ckpt = tmp_path / "m.bin"
    save_checkpoint(params, ckpt)
    history = tmp_path / "h.csv"
    history.write_text("user_id,item_id,timestamp\nx,nope,1\nx,nope2,2\n")
    code, _, err = run(capsys, "recommend", "--checkpoint", ckpt, "--vocab", prepared / "vocab.json",
                       "--history", history)
    assert code == 2 and "nope" in err


def test_config_reader(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\nlearning_rate = 0.01  # inline\nno_timespan = true\n")
    assert cli.read_config(path) == {"learning_rate": "0.01", "no_timespan": "true"}
