"""蒙特卡洛仿真模块测试"""
import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import csv
import io
import math
import unittest

import numpy as np

from channel_attacks import ChannelModel
from errors import DomainError
from gaussian_core import sample, epr_ensemble
from preparation import JOINT, PreparationConfig
from simulation_harness import (MU_LIMIT, SWEEP_COLUMNS, Comparison, GridPoint, RunConfig,
                                blackbox_equivalence, bootstrap_stderr, build_grid,
                                regression_mutual_information, run, sift_mask, sifting, sweep)


def coherent_run(g, eps=0.0, v=10.0, attack='none', n=100000, seed=1, **kwargs):
    return RunConfig(prep=PreparationConfig.coherent(v),
                     channel=ChannelModel.from_excess_noise(g, eps),
                     attack=attack, n=n, seed=seed, **kwargs)


class TestRunConfig(unittest.TestCase):
    """参数校验"""

    def test_minimum_symbols(self):
        with self.assertRaises(DomainError):
            coherent_run(0.5, n=999)
        coherent_run(0.5, n=1000)

    def test_invalid_choices(self):
        with self.assertRaises(DomainError):
            coherent_run(0.5, attack='intercept_resend')
        with self.assertRaises(DomainError):
            coherent_run(0.5, bob_basis_policy='both')
        with self.assertRaises(DomainError):
            coherent_run(0.5, source='laser')
        with self.assertRaises(DomainError):
            coherent_run(0.5, seed=-1)
        with self.assertRaises(DomainError):
            coherent_run(0.5, workers=0)

    def test_to_dict_omits_workers(self):
        data = coherent_run(0.5, workers=4).to_dict()
        self.assertNotIn('workers', data)
        self.assertEqual(data['seed'], 1)
        self.assertEqual(data['attack'], 'none')

    def test_comparison_z(self):
        self.assertAlmostEqual(Comparison(1.0, 1.2, 0.1).z, 2.0)
        self.assertEqual(Comparison(1.0, 1.0, 0.0).z, 0.0)
        self.assertEqual(Comparison(1.0, 0.5, 0.0).z, -math.inf)
        self.assertAlmostEqual(Comparison(1.0, 1.0, 0.1).biased(0.1).z, -1.0)


class TestRun(unittest.TestCase):
    """单次仿真与解析值对比"""

    def test_long_distance_mutual_information(self):
        """G=0.01, V=10, ε=0：I_BA ≈ 0.0622 bit/符号"""
        result = run(coherent_run(0.01, n=10 ** 6, seed=3))
        expected = 0.5 * math.log2(109.0 / 100.0)
        self.assertAlmostEqual(result.comparisons['i_ba'].analytic, expected, places=12)
        self.assertLess(abs(result.i_ba_hat - expected), 5 * result.i_ba_stderr)
        self.assertAlmostEqual(result.i_ba_hat, 0.0622, delta=0.002)
        self.assertFalse(result.flagged())

    def test_cloner_eve_conditional(self):
        """g=0.5, ε=0, V=10：Eve 对 Q_B 的条件方差 ≈ 1.8182 n0"""
        result = run(coherent_run(0.5, attack='entangling_cloner', n=10 ** 6, seed=4))
        comparison = result.comparisons['v_be']
        self.assertAlmostEqual(comparison.analytic, 1.0 / (0.5 * 1.1), places=12)
        self.assertLess(abs(comparison.z), 5.0)
        self.assertAlmostEqual(result.v_be_hat.value / 1.8182, 1.0, delta=0.01)
        self.assertIsNotNone(result.i_be_hat)

    def test_no_attack_has_no_eve_columns(self):
        result = run(coherent_run(0.5, n=20000))
        self.assertIsNone(result.v_be_hat)
        self.assertIsNone(result.i_be_hat)
        self.assertEqual(set(result.comparisons), {'v_ba', 'i_ba'})
        data = result.to_dict()
        self.assertIsNone(data['v_be_hat'])
        self.assertIsNone(data['i_be_hat'])

    def test_vacuum_modulation_carries_no_information(self):
        """V=1 时 Alice 的估计量恒为 0，互信息为 0"""
        cfg = RunConfig(prep=PreparationConfig(1.0, JOINT, mu=1.0),
                        channel=ChannelModel.from_excess_noise(0.5, 0.0), n=20000, seed=5)
        result = run(cfg)
        self.assertEqual(result.i_ba_hat, 0.0)
        self.assertEqual(result.comparisons['i_ba'].analytic, 0.0)
        self.assertFalse(result.flagged())

    def test_excess_noise_within_gate(self):
        result = run(coherent_run(0.9, eps=0.1, attack='entangling_cloner', n=200000, seed=6))
        self.assertFalse(result.flagged())
        self.assertLessEqual(result.max_abs_z(), 5.0)

    def test_workers_do_not_change_result(self):
        n = 3 * (1 << 16) + 5
        one = run(coherent_run(0.5, attack='entangling_cloner', n=n, seed=7, workers=1))
        many = run(coherent_run(0.5, attack='entangling_cloner', n=n, seed=7, workers=3))
        self.assertEqual(one.v_ba_hat.value, many.v_ba_hat.value)
        self.assertEqual(one.v_be_hat.value, many.v_be_hat.value)
        np.testing.assert_array_equal(one.key_bob, many.key_bob)

    def test_same_seed_identical(self):
        a = run(coherent_run(0.3, eps=0.05, n=20000, seed=8))
        b = run(coherent_run(0.3, eps=0.05, n=20000, seed=8))
        self.assertEqual(a.to_dict(), b.to_dict())
        c = run(coherent_run(0.3, eps=0.05, n=20000, seed=9))
        self.assertNotEqual(a.i_ba_hat, c.i_ba_hat)

    def test_epr_source_agrees(self):
        cfg = coherent_run(0.5, n=200000, seed=10, source='epr')
        self.assertFalse(run(cfg).flagged())

    def test_bootstrap(self):
        result = run(coherent_run(0.5, attack='entangling_cloner', n=5000, seed=11,
                                  bootstrap=True, bootstrap_resamples=50))
        self.assertIn('v_ba', result.bootstrap)
        self.assertIn('v_be', result.bootstrap)
        self.assertAlmostEqual(result.bootstrap['v_ba'] / result.v_ba_hat.stderr, 1.0, delta=0.5)


class TestSifting(unittest.TestCase):
    """测量基比对"""

    def test_joint_keeps_everything(self):
        cfg = coherent_run(0.5, n=20000, bob_basis_policy='random')
        result = sifting(cfg)
        self.assertEqual(result.fraction, 1.0)
        self.assertEqual(result.retained, 20000)

    def test_single_quadrature_random_bob(self):
        """单分量制备 + Bob 随机基：保留比例 ≈ 1/2"""
        cfg = RunConfig(prep=PreparationConfig.squeezed(10.0),
                        channel=ChannelModel.from_excess_noise(0.5, 0.0),
                        n=100000, seed=12, bob_basis_policy='random')
        result = sifting(cfg)
        self.assertLess(abs(result.fraction - 0.5), 5 * result.stderr)
        self.assertLess(abs(result.v_ba_hat.value / (0.5 * (1.0 + 0.1)) - 1.0), 0.05)

    def test_sift_mask(self):
        prep = PreparationConfig.squeezed(10.0)
        mask = sift_mask(prep, np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]))
        np.testing.assert_array_equal(mask, [True, False, False, True])
        joint = sift_mask(PreparationConfig.coherent(10.0), None, np.zeros(3))
        self.assertTrue(np.all(joint))

    def test_key_basis_recorded(self):
        cfg = RunConfig(prep=PreparationConfig.squeezed(10.0),
                        channel=ChannelModel.from_excess_noise(0.5, 0.0),
                        n=10000, seed=13, bob_basis_policy='random')
        result = run(cfg)
        self.assertEqual(len(result.key_alice), len(result.key_bob))
        self.assertEqual(len(result.key_basis), len(result.key_bob))

    def test_fixed_p_basis_names_basis(self):
        """Alice 固定测 P' 时没有 Q 分量统计量"""
        for policy in ('random', 'fixed_q'):
            cfg = RunConfig(prep=PreparationConfig.squeezed(10.0, "P'"),
                            channel=ChannelModel.from_excess_noise(0.5, 0.0),
                            n=10000, seed=14, bob_basis_policy=policy)
            with self.assertRaises(DomainError) as ctx:
                run(cfg)
            self.assertIn("P'", str(ctx.exception))


class TestEstimators(unittest.TestCase):
    """互信息与自助法估计"""

    def test_regression_mutual_information(self):
        batch = sample(epr_ensemble(10.0), 200000, seed=14)
        mi, stderr = regression_mutual_information(batch, "Q", ("Q'",))
        self.assertLess(abs(mi - 0.5 * math.log2(100.0)), 5 * stderr)

    def test_uncorrelated_is_small(self):
        batch = sample(epr_ensemble(10.0), 200000, seed=15)
        mi, stderr = regression_mutual_information(batch, "Q", ("P'",))
        self.assertLess(mi, 5 * stderr)

    def test_bootstrap_needs_resamples(self):
        batch = sample(epr_ensemble(10.0), 2000, seed=16)
        with self.assertRaises(DomainError):
            bootstrap_stderr(batch, "Q", ("Q'",), resamples=1)


class TestSweep(unittest.TestCase):
    """网格扫描"""

    def setUp(self):
        self.grid = build_grid((0.3, 0.8), (0.0, 0.1), (10.0,))
        self.template = coherent_run(0.5, attack='entangling_cloner', n=20000, seed=17)

    def test_grid_order(self):
        grid = build_grid((0.1, 0.5, 0.9), (0.0, 0.1, 0.2), (4.0, 10.0))
        self.assertEqual(len(grid), 18)
        self.assertEqual(grid[0], GridPoint(0.1, 0.0, 4.0, 1.0))
        self.assertEqual(grid[-1], GridPoint(0.9, 0.2, 10.0, 1.0))

    def test_grid_point_from_squeezing(self):
        """s 换算成 μ：μ = (sV−1)/(V−s)"""
        prep = GridPoint(0.5, 0.0, 10.0, s=2.0).prep_config()
        self.assertAlmostEqual(prep.mu, 19.0 / 8.0)
        self.assertAlmostEqual(prep.squeezing, 2.0)
        with self.assertRaises(DomainError):
            GridPoint(0.5, 0.0, 10.0, s=11.0).prep_config()

    def test_grid_point_at_squeezing_limit(self):
        """s=V 截断到 MU_LIMIT"""
        with self.assertLogs('simulation_harness', level='WARNING'):
            prep = GridPoint(0.5, 0.0, 10.0, s=10.0).prep_config()
        self.assertEqual(prep.mu, MU_LIMIT)
        self.assertAlmostEqual(prep.squeezing, 10.0, delta=1e-3)
        nearly = GridPoint(0.5, 0.0, 10.0, s=10.0 - 1e-12).prep_config()
        self.assertEqual(nearly.mu, MU_LIMIT)

    def test_rows_and_columns(self):
        table = sweep(self.grid, self.template)
        self.assertEqual(len(table.rows), 4)
        self.assertTrue(table.all_passed)
        reader = csv.reader(io.StringIO(table.to_csv()))
        header = next(reader)
        self.assertEqual(tuple(header), SWEEP_COLUMNS)
        body = list(reader)
        self.assertEqual(len(body), 4)
        self.assertEqual([row[0] for row in body], ['0', '1', '2', '3'])

    def test_rerun_is_identical(self):
        first = sweep(self.grid, self.template).to_csv()
        second = sweep(self.grid, self.template, workers=3).to_csv()
        self.assertEqual(first, second)

    def test_injected_bias_is_flagged(self):
        """解析值偏移 20% 时每一行都必须被标记"""
        table = sweep(self.grid, self.template, analytic_bias=0.2)
        self.assertFalse(table.all_passed)
        self.assertEqual(table.flagged_rows, 4)

    def test_no_attack_leaves_eve_cells_empty(self):
        template = coherent_run(0.5, n=20000, seed=18)
        table = sweep(self.grid[:1], template)
        row = table.rows[0]
        self.assertIsNone(row['v_be_analytic'])
        self.assertIsNone(row['i_be_z'])
        line = table.to_csv().splitlines()[1].split(',')
        self.assertEqual(line[SWEEP_COLUMNS.index('v_be_empirical')], '')
        self.assertEqual(line[SWEEP_COLUMNS.index('flagged')], 'false')

    def test_empty_grid(self):
        with self.assertRaises(DomainError):
            sweep([], self.template)

    def test_failures_propagate(self):
        """网格点参数非法时错误抛给调用方"""
        with self.assertRaises(DomainError):
            sweep([GridPoint(0.5, -1.0, 10.0)], self.template)


class TestBlackboxEquivalence(unittest.TestCase):
    """EPR 黑盒与直接调制黑盒不可区分"""

    def test_grid(self):
        for index, (v, mu) in enumerate((v, mu) for v in (1.5, 4.0, 10.0, 40.0)
                                        for mu in (0.25, 1.0, 4.0)):
            with self.subTest(v=v, mu=mu):
                result = blackbox_equivalence(PreparationConfig(v, JOINT, mu=mu), 100000,
                                              seed=19, stream=(index,))
                self.assertTrue(result.passed(), f"max|z|={result.max_abs_z}")
                self.assertEqual(result.labels, ("Q_A", "P_A", "Q", "P"))

    def test_single_quadrature(self):
        result = blackbox_equivalence(PreparationConfig.squeezed(10.0, "Q'"), 100000, seed=20)
        self.assertTrue(result.passed())


def run_tests():
    """运行所有测试"""
    if sys.platform == 'win32':
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

    print("=" * 60)
    print("仿真模块测试")
    print("=" * 60)

    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    suite.addTests(loader.loadTestsFromTestCase(TestRunConfig))
    suite.addTests(loader.loadTestsFromTestCase(TestRun))
    suite.addTests(loader.loadTestsFromTestCase(TestSifting))
    suite.addTests(loader.loadTestsFromTestCase(TestEstimators))
    suite.addTests(loader.loadTestsFromTestCase(TestSweep))
    suite.addTests(loader.loadTestsFromTestCase(TestBlackboxEquivalence))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    print("\n" + "=" * 60)
    print(f"测试完成: 运行 {result.testsRun} 个测试")
    print(f"成功: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"失败: {len(result.failures)}")
    print(f"错误: {len(result.errors)}")
    print("=" * 60)

    return result.wasSuccessful()


if __name__ == "__main__":
    success = run_tests()
    sys.exit(0 if success else 1)
