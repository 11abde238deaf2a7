import io

import numpy as np
import pytest

from moelab.cli import run
from moelab.core import Rng
from moelab.expansion import load_layer, save_layer
from moelab.rlloss import MaskConfig, RolloutBatch, dump_batch, rl_loss
from moelab.routing import ExpertBank, MoeLayerSpec


def run_to_file(tmp_path, name, argv):
    out = tmp_path / name
    code = run(argv + ["--out", str(out)])
    return code, out.read_text()


class TestBalanceSim:
    def test_grouped_row_is_perfectly_balanced(self, tmp_path):
        code, text = run_to_file(
            tmp_path, "b.csv",
            ["balance-sim", "--mode", "grouped", "--devices", "8", "--k", "8",
             "--tokens", "100", "--seed", "1"],
        )
        assert code == 0
        header, row = text.strip().split("\n")
        assert header == "mode,T,seed,max_over_mean,cv,balance_loss"
        fields = row.split(",")
        assert fields[:3] == ["grouped", "100", "1"]
        assert float(fields[3]) == 1.0
        assert float(fields[4]) == 0.0

    def test_byte_identical_reruns(self, tmp_path):
        argv = ["balance-sim", "--mode", "plain_topk", "--devices", "8", "--k", "8",
                "--tokens", "64", "--trials", "5", "--seed", "3", "--groups", "1"]
        _, first = run_to_file(tmp_path, "a.csv", argv)
        _, second = run_to_file(tmp_path, "b.csv", argv)
        assert first == second
        assert first.count("\n") == 6

    def test_trial_seeds_increment(self, tmp_path):
        code, text = run_to_file(
            tmp_path, "c.csv",
            ["balance-sim", "--trials", "3", "--seed", "10"],
        )
        assert code == 0
        seeds = [line.split(",")[2] for line in text.strip().split("\n")[1:]]
        assert seeds == ["10", "11", "12"]


class TestGradchecks:
    def test_ste_passes_and_reports(self, tmp_path):
        code, text = run_to_file(
            tmp_path, "g.csv", ["gradcheck-ste", "--n", "8", "--trials", "100", "--seed", "7"]
        )
        assert code == 0
        header, row = text.strip().split("\n")
        assert header == "trials,n,k,max_rel_err,unselected_nonzero"
        assert float(row.split(",")[3]) <= 1e-6

    def test_ste_fails_with_impossible_tolerance(self, tmp_path, capsys):
        code, _ = run_to_file(
            tmp_path, "g.csv",
            ["gradcheck-ste", "--trials", "10", "--tol", "1e-30", "--seed", "7"],
        )
        assert code == 1

    def test_rl_passes(self, tmp_path):
        code, text = run_to_file(
            tmp_path, "r.csv", ["gradcheck-rl", "--trials", "25", "--seed", "5"]
        )
        assert code == 0
        assert float(text.strip().split("\n")[1].split(",")[2]) <= 1e-6

    def test_rl_batch_evaluation_matches_library(self, tmp_path):
        rng = Rng(31)
        lens = [3, 2]
        mk = lambda: [-np.abs(rng.normal(l)) - 0.01 for l in lens]
        batch = RolloutBatch(
            logp_train=mk(), logp_rollout=mk(), logp_new=mk(), logp_old=mk(),
            rewards=np.array([1.0, 0.0]),
        )
        path = tmp_path / "batch.txt"
        with open(path, "w") as fp:
            dump_batch(batch, fp)
        code, text = run_to_file(
            tmp_path, "loss.csv", ["gradcheck-rl", "--batch", str(path)]
        )
        assert code == 0
        got = float(text.strip().split("\n")[1].split(",")[0])
        assert got == rl_loss(batch, MaskConfig()).loss


class TestExpand:
    def test_checkpoint_round_trip(self, tmp_path):
        rng = Rng(17)
        spec = MoeLayerSpec(num_experts=8, active_k=2, num_groups=1, model_dim=6, hidden_dim=12)
        bank = ExpertBank.random(rng, spec)
        w = rng.normal_matrix(8, 6)
        src = tmp_path / "layer.bin"
        with open(src, "wb") as fp:
            save_layer(fp, w, bank)

        dst = tmp_path / "expanded.bin"
        code, text = run_to_file(
            tmp_path, "e.csv",
            ["expand", "--input", str(src), "--output", str(dst),
             "--factor", "4", "--groups", "8", "--noise", "0", "--seed", "2"],
        )
        assert code == 0
        row = text.strip().split("\n")[1].split(",")
        assert row[0] == "8" and row[1] == "32" and float(row[2]) == 4.0

        new_w, new_bank = load_layer(open(dst, "rb"))
        assert new_bank.num_experts == 32
        assert new_bank.param_count == 4 * bank.param_count
        # zero noise: every expanded expert is a bitwise copy of some source
        sources = {tuple(bank.w_in[i].ravel()) for i in range(8)}
        for e in range(32):
            assert tuple(new_bank.w_in[e].ravel()) in sources

    def test_missing_input_is_module_error(self, tmp_path):
        code = run(["expand", "--input", str(tmp_path / "nope.bin"),
                    "--output", str(tmp_path / "out.bin")])
        assert code == 1


class TestReplayVerify:
    def test_record_then_replay_from_file(self, tmp_path):
        trace_path = tmp_path / "trace.bin"
        argv = ["replay-verify", "--tokens", "16", "--layers", "3", "--seed", "4"]
        code, text = run_to_file(
            tmp_path, "rv1.csv", argv + ["--record-trace", str(trace_path)]
        )
        assert code == 0
        assert trace_path.exists()
        code2, text2 = run_to_file(
            tmp_path, "rv2.csv", argv + ["--replay-trace", str(trace_path)]
        )
        assert code2 == 0
        row = text2.strip().split("\n")[1].split(",")
        assert row[-1] == "0"  # no mismatches

    def test_corrupt_trace_is_module_error(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + bytes(32))
        code = run(["replay-verify", "--replay-trace", str(bad)])
        assert code == 1


class TestPlanPatches:
    def test_long_signal_within_budget(self, tmp_path):
        code, text = run_to_file(
            tmp_path, "p.csv",
            ["plan-patches", "--len", "1000000", "--rate", "100", "--fmax", "4096"],
        )
        assert code == 0
        n_frames = int(text.strip().split("\n")[1].split(",")[-1])
        assert 1 <= n_frames <= 4096


class TestPrecisionSweep:
    def test_rows_and_determinism(self, tmp_path):
        argv = ["precision-sweep", "--policies", "fp32head,bf16head",
                "--trials", "3", "--seed", "11", "--samples", "4096"]
        code, a = run_to_file(tmp_path, "s1.csv", argv)
        _, b = run_to_file(tmp_path, "s2.csv", argv)
        assert code == 0
        assert a == b
        lines = a.strip().split("\n")
        assert lines[0] == "policy,seed,kl_k1,max_abs_logit_diff"
        assert len(lines) == 1 + 6

    def test_unknown_policy_is_module_error(self):
        code = run(["precision-sweep", "--policies", "fp13"])
        assert code == 1


class TestUsageAndConfig:
    def test_unknown_flag_exits_2(self, capsys):
        assert run(["balance-sim", "--bogus", "1"]) == 2
        capsys.readouterr()

    def test_unknown_subcommand_exits_2(self, capsys):
        assert run(["frobnicate"]) == 2
        capsys.readouterr()

    def test_help_exits_0(self, capsys):
        assert run(["--help"]) == 0
        capsys.readouterr()

    def test_config_supplies_defaults_and_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("tokens = 50\nmode = grouped\n# comment line\ndevices = 8\n")
        code, text = run_to_file(
            tmp_path, "cfg.csv",
            ["balance-sim", "--config", str(cfg), "--tokens", "70", "--seed", "2"],
        )
        assert code == 0
        row = text.strip().split("\n")[1].split(",")
        assert row[0] == "grouped"  # from config
        assert row[1] == "70"  # flag overrides config

    def test_unknown_config_key_is_module_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_factor = 9\n")
        assert run(["balance-sim", "--config", str(cfg)]) == 1
