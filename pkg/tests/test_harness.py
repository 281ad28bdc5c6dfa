import os

import numpy as np
import pytest
from click.testing import CliRunner

from metafn import cli, harness, inner_kernel, inner_maml, tasks
from metafn.errors import ConfigError
from metafn.harness import RunConfig, build_distribution, build_model, evaluate, train


def small_cfg(**kw):
    base = dict(
        seed=0,
        n_way=3,
        k_shot=1,
        q_query=5,
        meta_batch_size=2,
        n_meta_iters=3,
        eval_episodes=20,
        task={"kind": "gaussian_blobs", "n_classes": 16},
    )
    base.update(kw)
    return RunConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.n_way == 5 and cfg.k_shot == 1 and cfg.q_query == 15
        assert cfg.meta_batch_size == 4 and cfg.beta == 0.001
        assert cfg.inner_algorithm == "i_amfs" and cfg.outer_aggregator == "o_amfs"
        assert cfg.eval_episodes == 600 and cfg.threads == 1

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"learning_rate": 0.1})

    @pytest.mark.parametrize(
        "bad",
        [
            {"n_way": 0},
            {"beta": 0.0},
            {"inner_algorithm": "reptile"},
            {"outer_aggregator": "median"},
            {"optimizer": "rmsprop"},
            {"n_meta_iters": -1},
        ],
    )
    def test_invalid_values_rejected(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_from_toml(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text(
            'seed = 7\nn_way = 2\ninner_algorithm = "maml"\n\n'
            '[task]\nkind = "gaussian_blobs"\nn_classes = 8\n\n'
            "[inner]\ninner_lr = 0.05\nn_steps = 3\n"
        )
        cfg = RunConfig.from_toml(str(p))
        assert cfg.seed == 7 and cfg.n_way == 2
        icfg = cfg.inner_config()
        assert icfg.inner_lr == 0.05 and icfg.n_steps == 3 and icfg.order == "second"

    def test_from_toml_bad_syntax(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("seed = [unterminated")
        with pytest.raises(ConfigError):
            RunConfig.from_toml(str(p))

    def test_missing_task_kind(self):
        with pytest.raises(ConfigError):
            build_distribution({"n_classes": 4}, default_seed=0)

    def test_fo_maml_forces_first_order(self):
        assert small_cfg(inner_algorithm="fo_maml").inner_config().order == "first"


class TestTrainLoop:
    def test_zero_iters_keeps_initial_params(self, tmp_path):
        cfg = small_cfg(n_meta_iters=0, out=None)
        dist = build_distribution(cfg.task, default_seed=cfg.seed)
        fresh = build_model(cfg, dist).get_flat()
        model, records = train(cfg, out_dir=str(tmp_path))
        assert records == []
        np.testing.assert_array_equal(model.get_flat(), fresh)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines == ["iter,split,metric,value,ci95"]

    def test_byte_identical_reruns(self, tmp_path):
        cfg = small_cfg(dump_weights=True)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        train(cfg, out_dir=str(out1))
        train(cfg, out_dir=str(out2))
        for name in ("metrics.csv", "weights.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_solve_counter_invariant(self):
        inner_kernel.SOLVES.reset()
        cfg = small_cfg(n_meta_iters=4, eval_episodes=5)
        records = train(cfg)[1]
        # one factorization per task objective per iteration, plus one
        # per eval episode at the final evaluation
        assert records[-1].step_count == 0
        assert records[2].solve_count == 3 * cfg.meta_batch_size
        assert records[-1].solve_count == 4 * cfg.meta_batch_size + cfg.eval_episodes

    def test_step_counter_invariant(self):
        inner_maml.STEPS.reset()
        cfg = small_cfg(
            inner_algorithm="maml",
            inner={"n_steps": 3},
            n_meta_iters=2,
            eval_episodes=5,
        )
        records = train(cfg)[1]
        assert records[0].step_count == 3 * cfg.meta_batch_size
        # final eval runs n_steps of adaptation per episode too
        assert records[-1].step_count == 3 * (2 * cfg.meta_batch_size + 5)

    def test_threads_match_serial(self):
        r1 = train(small_cfg(threads=1))[1]
        r2 = train(small_cfg(threads=3))[1]
        for a, b in zip(r1, r2):
            assert a.train_loss == b.train_loss

    def test_metrics_schema(self, tmp_path):
        cfg = small_cfg(eval_interval=2, n_meta_iters=4)
        train(cfg, out_dir=str(tmp_path))
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iter,split,metric,value,ci95"
        evals = [l for l in lines[1:] if l.split(",")[1] == "eval"]
        assert len(evals) == 2  # iters 2 and 4
        for line in lines[1:]:
            it, split, metric, value, ci = line.split(",")
            assert int(it) >= 1 and split in ("train", "eval")
            float(value), float(ci)

    def test_weights_schema_and_bounds(self, tmp_path):
        cfg = small_cfg(dump_weights=True, meta_batch_size=3)
        train(cfg, out_dir=str(tmp_path))
        lines = (tmp_path / "weights.csv").read_text().splitlines()
        assert lines[0] == "iter,i,j,w_ij"
        assert len(lines) - 1 == cfg.n_meta_iters * 3 * 2  # m(m-1) pairs per iter
        for line in lines[1:]:
            it, i, j, w = line.split(",")
            assert i != j
            assert -1.0 <= float(w) <= 1.0


class TestEvaluate:
    def test_ci95_formula_exact(self):
        cfg = small_cfg(eval_episodes=40)
        dist = build_distribution(cfg.task, default_seed=cfg.seed)
        model = build_model(cfg, dist)
        s = evaluate(model, cfg, dist, eval_index=5)
        rng = np.random.default_rng([cfg.seed, harness._EVAL_TAG, 5])
        vals = np.array(
            [
                model.episode_metric(
                    tasks.sample_episode(dist, cfg.n_way, cfg.k_shot, cfg.q_query, rng)
                )
                for _ in range(40)
            ]
        )
        assert s.mean_metric == pytest.approx(float(vals.mean()), abs=1e-15)
        assert s.ci95_halfwidth == pytest.approx(
            1.96 * float(vals.std(ddof=0)) / np.sqrt(40), abs=1e-15
        )

    def test_untrained_maml_near_chance(self):
        cfg = small_cfg(
            inner_algorithm="maml", n_way=5, eval_episodes=200,
            task={"kind": "gaussian_blobs", "n_classes": 32},
        )
        dist = build_distribution(cfg.task, default_seed=cfg.seed)
        model = build_model(cfg, dist)
        s = evaluate(model, cfg, dist)
        assert abs(s.mean_metric - 0.2) < 0.08

    def test_separable_blobs_raw_kernel(self):
        # 2 classes 10 sigma apart: even an untrained wide kernel nails it
        cfg = small_cfg(
            n_way=2,
            eval_episodes=100,
            model={"kernel_on": "raw"},
            task={
                "kind": "gaussian_blobs",
                "centers": [[0.0, 0.0], [10.0, 0.0]],
                "cluster_std": 1.0,
            },
        )
        dist = build_distribution(cfg.task, default_seed=cfg.seed)
        model = build_model(cfg, dist)
        model.kp = inner_kernel.KernelParams(log_sigma=np.log(5.0))
        s = evaluate(model, cfg, dist)
        assert s.mean_metric >= 0.99

    def test_eval_stream_disjoint_from_train(self):
        cfg = small_cfg(n_meta_iters=5)
        dist = build_distribution(cfg.task, default_seed=cfg.seed)
        train_rng = np.random.default_rng([cfg.seed, harness._TRAIN_TAG])
        eval_rng = np.random.default_rng([cfg.seed, harness._EVAL_TAG, 0])
        train_hashes = {
            tasks.sample_episode(dist, 3, 1, 5, train_rng).content_hash()
            for _ in range(5 * cfg.meta_batch_size)
        }
        eval_hashes = {
            tasks.sample_episode(dist, 3, 1, 5, eval_rng).content_hash()
            for _ in range(20)
        }
        assert not train_hashes & eval_hashes


class TestScenario:
    def test_summary_structure(self, tmp_path):
        cfg = small_cfg(
            task_test={"kind": "gaussian_blobs", "n_classes": 16, "cluster_std": 0.3},
        )
        in_d, out_d = harness.scenario(cfg, out_dir=str(tmp_path))
        assert in_d.n_episodes == cfg.eval_episodes
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0] == "label,algorithm,aggregator,metric,mean,ci95,n_episodes"
        labels = [l.split(",")[0] for l in lines[1:]]
        assert labels == ["in_dist", "out_of_dist"]

    def test_missing_task_test(self):
        with pytest.raises(ConfigError):
            harness.scenario(small_cfg())


class TestCheckGradients:
    def test_all_paths_pass(self):
        results = harness.check_gradients(RunConfig())
        names = [n for n, _ in results]
        assert names == [
            "i_amfs/sigma_lambda",
            "i_amfs/embed",
            "maml/second_order",
            "fo_maml/query_grad",
        ]
        for name, rep in results:
            assert rep.passed, (name, rep)

    def test_corrupt_fails_every_path(self):
        for name, rep in harness.check_gradients(RunConfig(), corrupt=True):
            assert not rep.passed, name


class TestBenchSteps:
    def test_bench_csv(self, tmp_path):
        cfg = small_cfg(
            task={"kind": "sinusoid"}, n_way=1, k_shot=5, eval_episodes=10,
            inner={"n_steps": 1},
        )
        maml, amfs = harness.bench_steps(cfg, out_dir=str(tmp_path))
        assert sorted(maml) == [1, 2, 3, 4, 5]
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == "algorithm,inner_steps,metric,mean,ci95"
        assert len(lines) == 7
        assert lines[-1].startswith("i_amfs,1,mse,")


def write_toml(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


SMALL_TOML = (
    "n_way = 3\nk_shot = 1\nq_query = 5\nmeta_batch_size = 2\n"
    "n_meta_iters = 2\neval_episodes = 10\n\n"
    '[task]\nkind = "gaussian_blobs"\nn_classes = 16\n'
)


class TestCli:
    def test_train_writes_artifacts(self, tmp_path):
        cfg = write_toml(tmp_path, SMALL_TOML)
        out = tmp_path / "run"
        res = CliRunner().invoke(
            cli.main,
            ["train", "--config", cfg, "--out", str(out), "--dump-weights"],
        )
        assert res.exit_code == 0, res.output
        for name in ("metrics.csv", "weights.csv", "params.npz"):
            assert (out / name).exists()

    def test_eval_with_trained_params(self, tmp_path):
        cfg = write_toml(tmp_path, SMALL_TOML)
        out = tmp_path / "run"
        runner = CliRunner()
        assert runner.invoke(cli.main, ["train", "--config", cfg, "--out", str(out)]).exit_code == 0
        res = runner.invoke(
            cli.main,
            ["eval", "--config", cfg, "--params", str(out / "params.npz"),
             "--out", str(tmp_path / "ev")],
        )
        assert res.exit_code == 0, res.output
        assert "accuracy" in res.output
        assert (tmp_path / "ev" / "summary.csv").exists()

    def test_scenario_command(self, tmp_path):
        toml = SMALL_TOML + '\n[task_test]\nkind = "gaussian_blobs"\nn_classes = 16\ncluster_std = 0.5\n'
        cfg = write_toml(tmp_path, toml)
        res = CliRunner().invoke(
            cli.main, ["scenario", "--config", cfg, "--out", str(tmp_path / "sc")]
        )
        assert res.exit_code == 0, res.output
        assert "in-dist" in res.output and "out-of-dist" in res.output
        assert (tmp_path / "sc" / "summary.csv").exists()

    def test_check_grad_passes(self):
        res = CliRunner().invoke(cli.main, ["check-grad"])
        assert res.exit_code == 0, res.output
        assert res.output.count("PASS") == 4 and "FAIL" not in res.output

    def test_check_grad_corrupt_exit_3(self):
        res = CliRunner().invoke(cli.main, ["check-grad", "--corrupt"])
        assert res.exit_code == 3
        assert "FAIL" in res.output

    def test_bad_config_exit_2(self, tmp_path):
        cfg = write_toml(tmp_path, 'inner_algorithm = "reptile"\n')
        res = CliRunner().invoke(cli.main, ["train", "--config", cfg])
        assert res.exit_code == 2
        assert "config error" in res.output

    def test_unknown_key_exit_2(self, tmp_path):
        cfg = write_toml(tmp_path, "warmup = 5\n")
        res = CliRunner().invoke(cli.main, ["eval", "--config", cfg])
        assert res.exit_code == 2

    def test_numerical_failure_exit_3(self, tmp_path):
        toml = (
            'n_way = 1\nk_shot = 5\nq_query = 5\nmeta_batch_size = 2\n'
            'n_meta_iters = 2\neval_episodes = 10\ninner_algorithm = "maml"\n\n'
            '[task]\nkind = "sinusoid"\n\n'
            "[inner]\ninner_lr = 1e160\nn_steps = 4\n"
        )
        cfg = write_toml(tmp_path, toml)
        with np.errstate(all="ignore"):
            res = CliRunner().invoke(cli.main, ["train", "--config", cfg])
        assert res.exit_code == 3
        assert "numerical failure" in res.output

    def test_seed_override_changes_run(self, tmp_path):
        cfg = write_toml(tmp_path, SMALL_TOML)
        runner = CliRunner()
        o1, o2, o3 = (tmp_path / n for n in ("s1", "s2", "s3"))
        for out, seed in ((o1, "1"), (o2, "2"), (o3, "1")):
            assert runner.invoke(
                cli.main, ["train", "--config", cfg, "--seed", seed, "--out", str(out)]
            ).exit_code == 0
        assert (o1 / "metrics.csv").read_bytes() == (o3 / "metrics.csv").read_bytes()
        assert (o1 / "metrics.csv").read_bytes() != (o2 / "metrics.csv").read_bytes()

    def test_log_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("METAFN_LOG", "INFO")
        import logging

        root = logging.getLogger()
        old = root.level, list(root.handlers)
        try:
            root.handlers = []
            cfg = write_toml(tmp_path, SMALL_TOML)
            res = CliRunner().invoke(cli.main, ["train", "--config", cfg])
            assert res.exit_code == 0
            assert logging.getLogger("metafn").getEffectiveLevel() <= logging.INFO
        finally:
            root.level, root.handlers = old[0], old[1]
