"""Flag grammar, config files, and subcommand dispatch."""

import pytest

from adaptbench.cli import build_parser, main
from adaptbench.train import RunMetrics, TaskEpochMetrics, TASK_ORDER

# Benchmarked command lines from the original training script, minus the
# program name. The grammar must accept all of them verbatim.
PUBLISHED_LINES = [
    "--fine-tune-mode iterative --optim RAdam --sst_lr_multiplier 5 "
    "--para_weight_decay 1e-4 --lr 1e-4 --use_gpu --amp --batch_size 64 "
    "--train_sst --train_quora --train_sts --clf conv --epochs 10",
    "--fine-tune-mode iterative --sst_lr_multiplier 5 --para_weight_decay 1e-4 "
    "--lr 2.1e-4 --use_gpu --amp --batch_size 64 --train_sst --train_quora "
    "--train_sts --clf conv",
    "--fine-tune-mode full-model --sst_lr_multiplier 5 --para_weight_decay 1e-4 "
    "--lr 5e-5 --use_gpu --amp --batch_size 64 --train_sst --train_quora "
    "--train_sts --clf conv",
    "--fine-tune-mode iterative --sst_lr_multiplier 5 --para_weight_decay 1e-4 "
    "--lr 1e-4 --use_gpu --amp --batch_size 64 --train_sst --train_quora "
    "--train_sts --clf nonlinear",
    "--fine-tune-mode iterative --lr 1e-4 --use_gpu --amp --batch_size 64 "
    "--train_sst --train_quora --train_sts --clf conv --sst_weight_decay 9e-3 "
    "--para_weight_decay 1e-5 --sts_weight_decay 1e-2 --lr_lambda 0.5 "
    "--optim Adamax --sst_lr_multiplier 4 --para_lr_multiplier 1.0 "
    "--sts_lr_multiplier 3 --epochs 7",
    "--fine-tune-mode iterative --lr 1e-4 --use_gpu --amp --batch_size 64 "
    "--train_sst --train_quora --train_sts --clf conv --sst_weight_decay 9e-3 "
    "--para_weight_decay 1e-5 --sts_weight_decay 1e-2 --lr_lambda 0.55 "
    "--optim Adamax --sst_lr_multiplier 4 --para_lr_multiplier 1.0 "
    "--sts_lr_multiplier 3 --epochs 7 --num_sst_trains 2 --num_quora_trains 1 "
    "--num_sts_trains 5",
]

STEADY_HAND = PUBLISHED_LINES[4]

TINY = ["--epochs", "1", "--n_per_task", "24", "--batch_size", "8"]


def parse(argv):
    return build_parser().parse_args(argv)


class TestGrammar:
    @pytest.mark.parametrize("line", PUBLISHED_LINES)
    def test_published_command_lines_parse(self, line):
        args = parse(["train", *line.split()])
        assert args.use_gpu and args.amp

    def test_steady_hand_config_values(self):
        from adaptbench.cli import _train_config

        parser = build_parser()
        args = parser.parse_args(["train", *STEADY_HAND.split()])
        cfg = _train_config(args, parser)
        assert cfg.fine_tune_mode == "iterative"
        assert cfg.lr == 1e-4 and cfg.lr_lambda == 0.5
        assert cfg.optim_kind == "adamax"
        assert cfg.amp is True and cfg.batch_size == 64 and cfg.epochs == 7
        assert cfg.model.clf == "conv"
        assert cfg.lr_multipliers == {"sst": 4.0, "para": 1.0, "sts": 3.0}
        assert cfg.weight_decays == {"sst": 9e-3, "para": 1e-5, "sts": 1e-2}
        assert cfg.train_sst and cfg.train_para and cfg.train_sts
        assert cfg.adapter.mode == "none"

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            parse(["train", "--warp_speed", "9"])
        assert err.value.code == 2

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            parse(["--lr", "1e-3"])
        assert err.value.code == 2

    def test_lora_rank_without_mode_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["train", "--lora_rank", "5", *TINY])
        assert err.value.code == 2

    def test_dora_without_mode_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["train", "--use_dora", *TINY])
        assert err.value.code == 2

    def test_lora_flags_reach_the_adapter_config(self):
        from adaptbench.cli import _train_config

        parser = build_parser()
        args = parser.parse_args(
            ["train", "--lora_mode", "attn", "--lora_rank", "5", "--use_dora"])
        cfg = _train_config(args, parser)
        assert (cfg.adapter.mode, cfg.adapter.rank, cfg.adapter.use_dora) == \
            ("attn", 5, True)

    def test_no_task_flags_means_all_tasks(self):
        from adaptbench.cli import _train_config

        parser = build_parser()
        cfg = _train_config(parser.parse_args(["train"]), parser)
        assert cfg.train_sst and cfg.train_para and cfg.train_sts
        only_sst = _train_config(parser.parse_args(["train", "--train_sst"]), parser)
        assert only_sst.train_sst and not only_sst.train_para

    def test_ensemble_accepts_positional_and_flag_paths(self):
        assert parse(["ensemble", "m1.pt", "m2.pt"]).paths == ["m1.pt", "m2.pt"]
        assert parse(["ensemble", "--filepaths", "a.pt", "b.pt"]).filepaths == \
            ["a.pt", "b.pt"]

    def test_bench_paper_grid_parses(self):
        assert parse(["bench", "--grid", "paper"]).grid == "paper"


class TestConfigFile:
    def test_file_values_apply_but_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("lr=0.01\nepochs=5\n# comment\n\namp=true\n")
        parser = build_parser()
        argv = ["train", "--config", str(cfg), "--lr", "0.002"]
        args = parser.parse_args(argv)
        from adaptbench.cli import apply_config_file

        apply_config_file(args, argv)
        assert args.lr == 0.002  # explicit flag beats the file
        assert args.epochs == 5 and args.amp is True

    def test_hyphenated_keys_accepted(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("fine-tune-mode=iterative\n")
        parser = build_parser()
        args = parser.parse_args(["train", "--config", str(cfg)])
        from adaptbench.cli import apply_config_file

        apply_config_file(args, ["train", "--config", str(cfg)])
        assert args.fine_tune_mode == "iterative"

    def test_unknown_key_fails(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed=9\n")
        assert main(["train", "--config", str(cfg), *TINY]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_malformed_line_fails(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("just a line without equals\n")
        assert main(["train", "--config", str(cfg), *TINY]) == 1
        assert "expected key=value" in capsys.readouterr().err


class TestTrainCommand:
    def test_tiny_run_reports_best_score(self, capsys):
        assert main(["train", *TINY, "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "best overall" in out and "epoch" in out

    def test_use_gpu_notice(self, capsys):
        assert main(["train", *TINY, "--use_gpu"]) == 0
        assert "--use_gpu is ignored" in capsys.readouterr().out

    def test_unsupported_optimizer_fails_at_build(self, capsys):
        assert main(["train", *TINY, "--optim", "RAdam"]) == 1
        assert "not supported" in capsys.readouterr().err

    def test_adapter_run(self, capsys):
        rc = main(["train", *TINY, "--lora_mode", "attn-only", "--lora_rank", "2"])
        assert rc == 0


class TestEvalAndEnsembleCommands:
    @pytest.fixture()
    def checkpoint(self, tmp_path):
        path = tmp_path / "model.ckpt"
        assert main(["train", *TINY, "--save", str(path)]) == 0
        return path

    def test_eval_roundtrip(self, checkpoint, capsys):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--n_per_task", "24", "--batch_size", "8"]) == 0
        out = capsys.readouterr().out
        assert "overall:" in out and "sts_pearson:" in out

    def test_eval_missing_checkpoint(self, capsys):
        assert main(["eval", "--checkpoint", "nowhere.ckpt"]) == 1
        assert "nowhere.ckpt" in capsys.readouterr().err

    def test_eval_partial_tsv_set_rejected(self, checkpoint, tmp_path, capsys):
        capsys.readouterr()
        sst = tmp_path / "sst.tsv"
        sst.write_text("sentence\tsentiment\nfine film\t3\n")
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--sst_path", str(sst)]) == 1
        assert "all three dev files" in capsys.readouterr().err

    def test_eval_from_tsv_files(self, checkpoint, tmp_path, capsys):
        capsys.readouterr()
        sst = tmp_path / "sst.tsv"
        sst.write_text("sentence\tsentiment\n"
                       + "".join(f"film number {i} was fine\t{i % 5}\n"
                                 for i in range(8)))
        pair_rows = "".join(
            f"left words {i}\tright words {i}\t{i % 2}\n" for i in range(8))
        para = tmp_path / "para.tsv"
        para.write_text("sentence1\tsentence2\tis_duplicate\n" + pair_rows)
        sts_rows = "".join(
            f"left words {i}\tright words {i}\t{(i % 6):.1f}\n" for i in range(8))
        sts = tmp_path / "sts.tsv"
        sts.write_text("sentence1\tsentence2\tsimilarity\n" + sts_rows)
        assert main(["eval", "--checkpoint", str(checkpoint),
                     "--sst_path", str(sst), "--para_path", str(para),
                     "--sts_path", str(sts), "--batch_size", "4"]) == 0
        assert "overall:" in capsys.readouterr().out

    def test_ensemble_command(self, checkpoint, capsys):
        capsys.readouterr()
        assert main(["ensemble", "--filepaths", str(checkpoint), str(checkpoint),
                     "--n_per_task", "24", "--batch_size", "8"]) == 0
        out = capsys.readouterr().out
        assert "2 members loaded" in out and "overall:" in out

    def test_ensemble_without_paths_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["ensemble"])
        assert err.value.code == 2

    def test_ensemble_with_missing_member_fails(self, checkpoint, capsys):
        assert main(["ensemble", str(checkpoint), "gone.ckpt"]) == 1
        assert "gone.ckpt" in capsys.readouterr().err


class TestBenchCommand:
    def test_desk_sweep_writes_csv(self, tmp_path, monkeypatch, capsys):
        def instant(rc, n_per_task=0, data_seed=0, seed=0):
            metrics = RunMetrics()
            for task in TASK_ORDER:
                metrics.rows.append(TaskEpochMetrics(
                    task=task, epoch=0, wall_ms=5.0, peak_bytes=100,
                    activation_bytes=50.0, steps=1, skipped_steps=0,
                    mean_loss=1.0))
            metrics.epoch_scores.append(
                {"sst_acc": 0.5, "para_acc": 0.5, "sts_pearson": 0.5,
                 "overall": 0.5})
            return metrics

        monkeypatch.setattr("adaptbench.cli.desk_runner", instant)
        out = tmp_path / "report.csv"
        assert main(["bench", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "feasible configs" in printed and "best overall" in printed
        header = out.read_text().splitlines()[0]
        assert header.startswith("config_id,amp,mode,rank")

    def test_limited_real_sweep(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        assert main(["bench", "--limit", "1", "--n_per_task", "32",
                     "--out", str(out)]) == 0
        assert out.exists()
        assert "running 1 feasible configs" in capsys.readouterr().out
