import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemb import cli
from pemb.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from pemb.config import RunConfig, load_config_file
from pemb.data import default_family, gen_dataset, gen_eval_set, read_dataset, write_dataset
from pemb.errors import (ConfigError, ConfigHashMismatchError, CorruptHeaderError, DataError,
                         DimMismatchError, TruncatedCheckpointError)
from pemb.evaluate import ModelEmbedder, OracleEmbedder, RandomEmbedder, eval_retrieval
from pemb.model import PromptEmbedder
from pemb.trainer import ABLATION_HEADER, load_model, save_model, write_ablation_csv

FAM = default_family()

# ------------------------------------------------------------------ data


def test_dataset_is_byte_identical_per_seed(tmp_path):
    write_dataset(tmp_path / "a.jsonl", gen_dataset(3, FAM, 20))
    write_dataset(tmp_path / "b.jsonl", gen_dataset(3, FAM, 20))
    write_dataset(tmp_path / "c.jsonl", gen_dataset(4, FAM, 20))
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()
    back = read_dataset(tmp_path / "a.jsonl")
    assert back == gen_dataset(3, FAM, 20)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 8))
def test_records_satisfy_relation_checker(seed, n_tasks, per_class):
    fam = default_family(n_tasks, per_class)
    data = gen_dataset(seed, fam, 6)
    assert len(data) == 6 * n_tasks
    assert sorted({d.task for d in data}) == list(range(n_tasks))
    for d in data:
        task = fam.task(d.task)
        assert d.instruction == task.instruction
        assert task.check(d.query, d.positive)
        assert not task.check(d.query, d.negative)
        diff = sum(a != b for a, b in zip(d.positive, d.negative))
        assert len(d.negative) == len(d.positive) and 1 <= diff <= 2


def test_instructions_carry_information():
    data = gen_dataset(0, FAM, 5)
    q = data[0].query
    answers = {t.relation(q) for t in FAM.tasks}
    assert len(answers) == FAM.n_tasks
    assert len({t.instruction for t in FAM.tasks}) == FAM.n_tasks


def test_bad_dataset_files(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"query": [1]}\n')
    with pytest.raises(DataError, match="bad.jsonl:1"):
        read_dataset(p)
    with pytest.raises(DataError):
        read_dataset(tmp_path / "missing.jsonl")
    with pytest.raises(ConfigError):
        default_family(4, 20, 64)


def test_eval_set_shape_and_determinism():
    a = gen_eval_set(5, FAM, 40, 16)
    assert a == gen_eval_set(5, FAM, 40, 16)
    for it in a:
        assert len(it.distractors) == 15 and len(set(it.distractors)) == 15
        assert it.positive not in it.distractors
        assert all(len(d) == len(it.positive) for d in it.distractors)
    with pytest.raises(ConfigError):
        gen_eval_set(5, FAM, 4, 1)


# ------------------------------------------------------------------ retrieval

ITEMS = gen_eval_set(1000, FAM, 512, 16)


def chance_band(n, p=1 / 16):
    s = 3 * math.sqrt(p * (1 - p) / n)
    return p - s, p + s


def test_oracle_embedder_is_perfect():
    score = eval_retrieval(OracleEmbedder(FAM), ITEMS)
    assert score.accuracy == 1.0 and score.mrr == 1.0


def test_random_embedder_sits_at_chance():
    lo, hi = chance_band(512)
    assert lo == pytest.approx(0.030406, abs=1e-6) and hi == pytest.approx(0.094594, abs=1e-6)
    for seed in range(3):
        acc = eval_retrieval(RandomEmbedder(48, seed), ITEMS).accuracy
        assert lo <= acc <= hi


def test_constant_embedder_loses_every_tie():
    class Const:
        def queries(self, i, t):
            return np.ones((len(t), 4))

        documents = queries

    s = eval_retrieval(Const(), ITEMS[:32])
    assert s.accuracy == 0.0 and s.mrr == pytest.approx(1 / 16)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_mrr_dominates_accuracy(seed):
    s = eval_retrieval(RandomEmbedder(8, seed), ITEMS[:64])
    assert 0 <= s.accuracy <= s.mrr <= 1 and s.mrr > 0


# ------------------------------------------------------------------ checkpoints

def small_tensors(rng):
    return {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": np.float32(rng.standard_normal(4)),
            "scalar": np.array(1.5, dtype=np.float32)}


def test_format_bytes_by_hand():
    blob = encode({"w": np.array([[1.0, -2.0]], dtype=np.float32)}, b"\x01" * 8)
    expect = (b"PEMB" + struct.pack("<I", 1) + b"\x01" * 8 + struct.pack("<I", 1)
              + struct.pack("<H", 1) + b"w" + bytes([2]) + struct.pack("<2I", 1, 2)
              + struct.pack("<2f", 1.0, -2.0))
    assert blob == expect


def test_round_trip_bytes(tmp_path, rng):
    t = small_tensors(rng)
    save_checkpoint(tmp_path / "x.pemb", t, b"h" * 8)
    ck = load_checkpoint(tmp_path / "x.pemb")
    assert list(ck.tensors) == list(t)
    for n in t:
        assert ck.tensors[n].tobytes() == np.asarray(t[n]).tobytes()
    save_checkpoint(tmp_path / "y.pemb", ck.tensors, ck.config_hash)
    assert (tmp_path / "x.pemb").read_bytes() == (tmp_path / "y.pemb").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_errors(rng):
    blob = encode(small_tensors(rng), b"h" * 8)
    for cut in (3, 10, 21, len(blob) - 1):
        with pytest.raises(TruncatedCheckpointError) as e:
            decode(blob[:cut])
        assert e.value.code == "truncated"
    with pytest.raises(CorruptHeaderError):
        decode(b"XEMB" + blob[4:])
    with pytest.raises(CorruptHeaderError):
        decode(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(CorruptHeaderError):
        decode(blob + b"\0")
    with pytest.raises(ConfigHashMismatchError) as e:
        decode(blob, expected_hash=b"g" * 8)
    assert e.value.code == "hash-mismatch"
    with pytest.raises(DimMismatchError, match="tensor a"):
        decode(blob, {"a": (3, 2)}, b"g" * 8)
    with pytest.raises(DimMismatchError, match="no tensor z"):
        decode(blob, {"z": (1,)})
    codes = {CorruptHeaderError("").code, TruncatedCheckpointError("").code,
             ConfigHashMismatchError("").code, DimMismatchError("").code}
    assert len(codes) == 4 and MAGIC == b"PEMB"


def test_model_round_trip_preserves_eval(tmp_path):
    cfg = RunConfig()
    m = PromptEmbedder.build(cfg)
    for A, B in m.lora.factors.values():
        B.data[:] = np.random.default_rng(0).standard_normal(B.shape).astype(np.float32) * 0.1
    items = ITEMS[:64]
    s0 = eval_retrieval(ModelEmbedder(m), items)
    save_model(tmp_path / "m.pemb", m)
    back = load_model(tmp_path / "m.pemb", cfg)
    assert eval_retrieval(ModelEmbedder(back), items) == s0
    with pytest.raises(DimMismatchError):
        load_model(tmp_path / "m.pemb", cfg.replace(d_e=24))
    with pytest.raises(ConfigHashMismatchError):
        load_model(tmp_path / "m.pemb", cfg.replace(temperature=2.0))


def test_config_hash_tracks_architecture_only():
    base = RunConfig()
    assert base.hash() == base.replace(lr=0.5, seed=9).hash()
    assert base.hash() != base.replace(k=3).hash()
    assert len(base.hash()) == 8


# ------------------------------------------------------------------ config + cli

def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("total_steps: 7\nlr: 0.01\nk: 2\n")
    assert load_config_file(p) == {"total_steps": 7, "lr": 0.01, "k": 2}
    args = cli.build_parser().parse_args(["gen-data", "--out", "x", "--config", str(p), "--k", "4"])
    cfg = cli._resolve(args)
    assert (cfg.total_steps, cfg.lr, cfg.k) == (7, 0.01, 4)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"k": "two"})
    assert RunConfig.from_dict({"stop-at-threshold": "yes"}).stop_at_threshold is True


def test_ablation_csv(tmp_path):
    rows = [{"k": 0, "accuracy_at_1": 0.1, "mrr": 0.2, "steps": 0},
            {"k": 3, "accuracy_at_1": 0.5, "mrr": 0.6, "steps": 10}]
    write_ablation_csv(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(ABLATION_HEADER) == "k,accuracy_at_1,mrr,steps"
    assert lines[2] == "3,0.500000,0.600000,10"


def run_cli(argv, capsys):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    assert run_cli(["gen-data", "--out", data, "--per-task", 20], capsys)[0] == 0
    assert len(read_dataset(data)) == 80
    small = ["--total-steps", 4, "--eval-every", 2, "--eval-queries", 16]
    code, out = run_cli(["train", "--data", data, "--out-dir", tmp_path / "s", *small], capsys)
    assert code == 0, out.err
    recs = [json.loads(x) for x in (tmp_path / "s" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 2, 4]
    ckpt = tmp_path / "s" / "model.pemb"
    code, out = run_cli(["eval", "--ckpt", ckpt], capsys)
    assert code == 0 and json.loads(out.out)["accuracy_at_1"] == recs[-1]["accuracy_at_1"]
    code, out = run_cli(["transfer", "--source", ckpt, "--data", data, "--out-dir", tmp_path / "t"], capsys)
    assert code == 0, out.err
    assert json.loads(out.out)["trainable_params"] == 1920
    code, out = run_cli(["inspect-ckpt", tmp_path / "t" / "model.pemb"], capsys)
    assert code == 0 and "align.W_adp" in out.out and "40x48" in out.out
    code, out = run_cli(["ablate-k", "--k-list", "0", "--out", tmp_path / "k.csv", "--eval-queries", 16], capsys)
    assert code == 0 and (tmp_path / "k.csv").read_text().splitlines()[1].startswith("0,")


def test_cli_exit_codes(tmp_path, capsys):
    assert run_cli(["train", "--out-dir", tmp_path, "--k", "-1"], capsys)[0] == 2
    assert run_cli(["train", "--out-dir", tmp_path, "--mode", "transfer"], capsys)[0] == 2
    assert run_cli(["train", "--out-dir", tmp_path, "--data", tmp_path / "none.jsonl"], capsys)[0] == 3
    bad = tmp_path / "bad.pemb"
    bad.write_bytes(b"PEMB\x01\x00")
    code, out = run_cli(["inspect-ckpt", bad], capsys)
    assert code == 5 and "[truncated]" in out.err
    assert run_cli(["ablate-k", "--k-list", "x", "--out", tmp_path / "k.csv"], capsys)[0] == 2


def test_cli_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    m = PromptEmbedder.build(RunConfig())
    save_model(tmp_path / "m.pemb", m)
    code, out = run_cli(["eval", "--ckpt", tmp_path / "m.pemb", "--d-e", 24], capsys)
    assert code == 5 and "dim-mismatch" in out.err
