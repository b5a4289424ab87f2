"""
蒙特卡洛仿真模块

可复现的端到端流水线：制备 → 信道/攻击 → Bob 测量 → 经验统计，
作为 security_analysis 中每个解析结果的独立检验。

子流按 (seed, 网格点编号, 用途, 分块编号) 派生，结果与线程数无关。
"""
import csv
import io
import itertools
import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from channel_attacks import (ChannelModel, eve_conditional_variance_bound, eve_record_labels,
                             entangling_cloner_attack, propagate)
from errors import DomainError
from gaussian_core import (EmpiricalConditional, GaussianEnsemble, N0Like, SampleBatch,
                           derive_rng, empirical_conditional_variance, empirical_ensemble,
                           n0_value)
from preparation import (JOINT, SINGLE_QUADRATURE, PreparationConfig, conditional_variances,
                         prepare_direct, prepare_via_epr, prepared_ensemble)

logger = logging.getLogger(__name__)

ATTACKS = ('none', 'entangling_cloner')
BOB_BASIS_POLICIES = ('fixed_q', 'random')
SOURCES = ('direct', 'epr')

MIN_SYMBOLS = 1000
Z_GATE = 5.0
BOOTSTRAP_RESAMPLES = 200
# s=V 的截断；s 的偏差约 V²/μ
MU_LIMIT = 1e6

STREAM_BOB_BASIS = 21
STREAM_BOOTSTRAP = 22

QUANTITIES = ('v_ba', 'v_be', 'i_ba', 'i_be')
SWEEP_COLUMNS = (('index', 'g', 'eps', 'v', 'mu')
                 + tuple(f"{q}_{part}" for q in QUANTITIES
                         for part in ('analytic', 'empirical', 'stderr', 'z'))
                 + ('max_abs_z', 'flagged'))


@dataclass
class RunConfig:
    """一次仿真的全部参数

    Attributes:
        prep: Alice 的制备方式
        channel: Alice→Bob 信道
        attack: 'none' 或 'entangling_cloner'
        n: 符号数
        seed: 种子（写入输出）
        bob_basis_policy: 'fixed_q' 或 'random'
        n0: 散粒噪声单位
        workers: 采样线程数
        grid_index: 网格点编号，参与子流派生
        source: 'direct'（直接调制）或 'epr'（虚拟纠缠）
        bootstrap: 是否附加自助法标准误差
    """
    prep: PreparationConfig
    channel: ChannelModel
    attack: str = 'none'
    n: int = 100000
    seed: int = 0
    bob_basis_policy: str = 'fixed_q'
    n0: float = 1.0
    workers: int = 1
    grid_index: int = 0
    source: str = 'direct'
    bootstrap: bool = False
    bootstrap_resamples: int = BOOTSTRAP_RESAMPLES

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise DomainError(f"未知的攻击类型: {self.attack}")
        if self.bob_basis_policy not in BOB_BASIS_POLICIES:
            raise DomainError(f"未知的 Bob 测量基策略: {self.bob_basis_policy}")
        if self.source not in SOURCES:
            raise DomainError(f"未知的制备方式: {self.source}")
        if self.n < MIN_SYMBOLS:
            raise DomainError(f"符号数至少为 {MIN_SYMBOLS}: {self.n}")
        if self.seed < 0 or self.grid_index < 0:
            raise DomainError(f"种子和网格编号必须为非负整数: {self.seed}, {self.grid_index}")
        if self.workers < 1:
            raise DomainError(f"线程数至少为 1: {self.workers}")
        self.n0 = n0_value(self.n0)

    @property
    def stream(self) -> Tuple[int, ...]:
        return (self.grid_index,)

    def to_dict(self) -> Dict:
        """转换为字典（workers 不影响结果，不写入）"""
        return {
            'prep': self.prep.to_dict(),
            'channel': self.channel.to_dict(),
            'attack': self.attack,
            'n': self.n,
            'seed': self.seed,
            'bob_basis_policy': self.bob_basis_policy,
            'n0': self.n0,
            'grid_index': self.grid_index,
            'source': self.source,
        }


@dataclass
class Comparison:
    """解析值与经验值的比较"""
    analytic: float
    empirical: float
    stderr: float

    @property
    def z(self) -> float:
        diff = self.empirical - self.analytic
        if self.stderr > 0:
            return diff / self.stderr
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)

    def biased(self, bias: float) -> 'Comparison':
        """解析值乘以 (1+bias)，用于反向对照"""
        return Comparison(self.analytic * (1.0 + bias), self.empirical, self.stderr)

    def to_dict(self) -> Dict:
        return {'analytic': self.analytic, 'empirical': self.empirical,
                'stderr': self.stderr, 'z': self.z}


@dataclass
class RunResult:
    """仿真结果

    Attributes:
        config: 输入参数
        empirical_cov: (Q_A, P_A, Q_B, P_B[, Eve 记录]) 的经验协方差，未测量的估计量按 0 计
        var_b_hat: Bob Q 分量的经验方差
        v_ba_hat / v_be_hat: Q_B 在 Alice / Eve 数据条件下的经验条件方差
        i_ba_hat / i_be_hat: 高斯公式给出的互信息估计及其标准误差
        comparisons: 每个量的解析值对比
        retained_fraction: 筛选后保留的比例
        key_alice / key_bob: 筛选后的实数密钥元素（不序列化）
        key_basis: 密钥元素对应的 Bob 测量基（0 = Q，1 = P）
    """
    config: RunConfig
    empirical_cov: GaussianEnsemble
    var_b_hat: EmpiricalConditional
    v_ba_hat: EmpiricalConditional
    i_ba_hat: float
    i_ba_stderr: float
    v_be_hat: Optional[EmpiricalConditional] = None
    i_be_hat: Optional[float] = None
    i_be_stderr: Optional[float] = None
    retained_fraction: float = 1.0
    retained_stderr: float = 0.0
    comparisons: Dict[str, Comparison] = field(default_factory=dict)
    bootstrap: Optional[Dict[str, float]] = None
    key_alice: Optional[np.ndarray] = field(default=None, repr=False)
    key_bob: Optional[np.ndarray] = field(default=None, repr=False)
    key_basis: Optional[np.ndarray] = field(default=None, repr=False)

    def max_abs_z(self) -> float:
        if not self.comparisons:
            return 0.0
        return max(abs(c.z) for c in self.comparisons.values())

    def flagged(self, z_gate: float = Z_GATE) -> bool:
        return self.max_abs_z() > z_gate

    def to_dict(self) -> Dict:
        """转换为字典"""
        def conditional(value: Optional[EmpiricalConditional]):
            if value is None:
                return None
            return {'value': value.value, 'stderr': value.stderr,
                    'degenerate': value.degenerate, 'dof': value.dof}

        return {
            'config': self.config.to_dict(),
            'seed': self.config.seed,
            'empirical_cov': self.empirical_cov.to_dict(),
            'var_b_hat': conditional(self.var_b_hat),
            'v_ba_hat': conditional(self.v_ba_hat),
            'v_be_hat': conditional(self.v_be_hat),
            'i_ba_hat': {'value': self.i_ba_hat, 'stderr': self.i_ba_stderr},
            'i_be_hat': None if self.i_be_hat is None else {'value': self.i_be_hat,
                                                            'stderr': self.i_be_stderr},
            'retained_fraction': {'value': self.retained_fraction, 'stderr': self.retained_stderr},
            'comparisons': {k: c.to_dict() for k, c in self.comparisons.items()},
            'bootstrap': self.bootstrap,
            'max_abs_z': self.max_abs_z(),
        }


@dataclass
class SiftingResult:
    """基比对筛选的统计"""
    retained: int
    n: int
    fraction: float
    stderr: float
    v_ba_hat: EmpiricalConditional


def regression_mutual_information(batch: SampleBatch, target: str,
                                  given: Sequence[str]) -> Tuple[float, float]:
    """用高斯公式 −½·log2(1−R²) 由经验（复）相关系数估计互信息

    标准误差取增量法 √(R²/n + (k/n)²)/ln2，第二项覆盖 R→0 时的有限样本偏差。
    """
    y = batch.column(target)
    x = batch.columns(given)
    n, k = batch.n, len(given)
    tss = float(y @ y)
    if tss <= 0:
        return 0.0, 0.0
    if not np.any(x):
        r2 = 0.0
    else:
        coef = np.linalg.lstsq(x, y, rcond=None)[0]
        residual = y - x @ coef
        r2 = min(max(1.0 - float(residual @ residual) / tss, 0.0), 1.0)
    mi = math.inf if r2 >= 1.0 else -0.5 * math.log2(1.0 - r2)
    stderr = math.sqrt(r2 / n + (k / n) ** 2) / math.log(2.0)
    return mi, stderr


def bootstrap_stderr(batch: SampleBatch, target: str, given: Sequence[str],
                     resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> float:
    """自助法估计条件方差的标准误差，作为卡方近似的交叉检验"""
    if resamples < 2:
        raise DomainError(f"自助法重采样次数至少为 2: {resamples}")
    rng = derive_rng(seed, STREAM_BOOTSTRAP)
    values = np.empty(resamples)
    for r in range(resamples):
        rows = rng.integers(0, batch.n, size=batch.n)
        values[r] = empirical_conditional_variance(batch.subset(rows), target, given).value
    return float(np.std(values, ddof=1))


def bob_basis_choices(cfg: RunConfig) -> np.ndarray:
    """Bob 的测量基（0 = Q，1 = P）"""
    if cfg.bob_basis_policy == 'fixed_q':
        return np.zeros(cfg.n, dtype=np.int8)
    rng = derive_rng(cfg.seed, *cfg.stream, STREAM_BOB_BASIS)
    return rng.integers(0, 2, size=cfg.n, dtype=np.int8)


def sift_mask(prep: PreparationConfig, alice_basis: Optional[np.ndarray],
              bob_basis: np.ndarray) -> np.ndarray:
    """保留 Alice 与 Bob 测量同一分量的符号；联合测量不需要筛选"""
    if prep.mode == JOINT or alice_basis is None:
        return np.ones(bob_basis.shape[0], dtype=bool)
    return alice_basis == bob_basis


def _analytic_values(cfg: RunConfig) -> Dict[str, Optional[float]]:
    ch, v, unit = cfg.channel, cfg.prep.v, cfg.n0
    cq = conditional_variances(cfg.prep, 1.0, "Q'" if cfg.prep.mode == SINGLE_QUADRATURE else None)[0]
    var_b = ch.g_q * (v + ch.chi_q)
    v_ba = ch.g_q * (ch.chi_q + cq)
    values = {
        'v_ba': v_ba * unit,
        'i_ba': 0.5 * math.log2(var_b / v_ba),
        'v_be': None,
        'i_be': None,
    }
    if cfg.attack == 'entangling_cloner':
        v_be = eve_conditional_variance_bound(ch, v, 1.0)[0]
        values['v_be'] = v_be * unit
        values['i_be'] = 0.5 * math.log2(var_b / v_be)
    return values


def _simulate(cfg: RunConfig) -> Tuple[SampleBatch, Optional[np.ndarray]]:
    """制备并发送，返回 (Q_A, P_A, Q, P, Q_B, P_B[, Eve 记录]) 与 Alice 的测量基"""
    prepare = prepare_direct if cfg.source == 'direct' else prepare_via_epr
    prepared = prepare(cfg.prep, cfg.n, cfg.seed, n0=cfg.n0, workers=cfg.workers,
                       stream=cfg.stream)
    if cfg.attack == 'none':
        bob = propagate(cfg.channel, prepared.transmitted, cfg.seed, n0=cfg.n0,
                        workers=cfg.workers, stream=cfg.stream)
        records = prepared.batch.joined(bob)
    else:
        cloned = entangling_cloner_attack(cfg.channel, prepared.transmitted, cfg.prep.v, cfg.seed,
                                          n0=cfg.n0, workers=cfg.workers, stream=cfg.stream)
        records = prepared.batch.joined(cloned.bob).joined(cloned.eve)
    return records, prepared.basis


def run(cfg: RunConfig) -> RunResult:
    """执行一次完整仿真

    Q 分量的统计量在 “Bob 测 Q 且保留” 的符号上计算；
    相同 RunConfig（与 workers 无关）给出逐位相同的结果。
    """
    logger.info(f"开始仿真: n={cfg.n}, seed={cfg.seed}, attack={cfg.attack}, "
                f"G={cfg.channel.g_q:.6g}, ε={cfg.channel.eps_q:.6g}, V={cfg.prep.v}")
    records, alice_basis = _simulate(cfg)
    bob_basis = bob_basis_choices(cfg)
    kept = sift_mask(cfg.prep, alice_basis, bob_basis)
    retained = int(kept.sum())
    if retained == 0:
        raise DomainError(f"筛选后没有剩余符号：Alice 的基为 {cfg.prep.measured_quadrature}，"
                          f"Bob 的策略为 {cfg.bob_basis_policy}")
    fraction = retained / cfg.n
    retained_stderr = math.sqrt(fraction * (1.0 - fraction) / cfg.n)

    on_q = bob_basis == 0
    key_alice = np.where(on_q, records.column("Q_A"), records.column("P_A"))[kept]
    key_bob = np.where(on_q, records.column("Q_B"), records.column("P_B"))[kept]

    stats = records.subset(kept & on_q)
    if stats.n == 0:
        raise DomainError(f"Alice 固定在 {cfg.prep.measured_quadrature} 基上制备，"
                          f"没有 Bob 测 Q 且保留的符号可用于统计")
    if stats.n < MIN_SYMBOLS:
        logger.warning(f"用于统计的符号只有 {stats.n} 个")
    var_b = empirical_conditional_variance(stats, "Q_B", ())
    v_ba = empirical_conditional_variance(stats, "Q_B", ("Q_A",))
    i_ba, i_ba_se = regression_mutual_information(stats, "Q_B", ("Q_A",))

    analytic = _analytic_values(cfg)
    comparisons = {
        'v_ba': Comparison(analytic['v_ba'], v_ba.value, v_ba.stderr),
        'i_ba': Comparison(analytic['i_ba'], i_ba, i_ba_se),
    }
    cov_labels = ("Q_A", "P_A", "Q_B", "P_B")
    v_be = i_be = i_be_se = None
    if cfg.attack == 'entangling_cloner':
        eve_labels = eve_record_labels(cfg.channel, "Q")
        v_be = empirical_conditional_variance(stats, "Q_B", eve_labels)
        i_be, i_be_se = regression_mutual_information(stats, "Q_B", eve_labels)
        comparisons['v_be'] = Comparison(analytic['v_be'], v_be.value, v_be.stderr)
        comparisons['i_be'] = Comparison(analytic['i_be'], i_be, i_be_se)
        cov_labels += ("Q_E2", "P_E2", "Q_known", "P_known")

    selected = records.select(cov_labels)
    empirical_cov = empirical_ensemble(SampleBatch(cov_labels, np.nan_to_num(selected.data),
                                                   cfg.seed))

    boot = None
    if cfg.bootstrap:
        boot = {'v_ba': bootstrap_stderr(stats, "Q_B", ("Q_A",), cfg.bootstrap_resamples, cfg.seed)}
        if cfg.attack == 'entangling_cloner':
            boot['v_be'] = bootstrap_stderr(stats, "Q_B", eve_record_labels(cfg.channel, "Q"),
                                            cfg.bootstrap_resamples, cfg.seed)

    result = RunResult(
        config=cfg,
        empirical_cov=empirical_cov,
        var_b_hat=var_b,
        v_ba_hat=v_ba,
        i_ba_hat=i_ba,
        i_ba_stderr=i_ba_se,
        v_be_hat=v_be,
        i_be_hat=i_be,
        i_be_stderr=i_be_se,
        retained_fraction=fraction,
        retained_stderr=retained_stderr,
        comparisons=comparisons,
        bootstrap=boot,
        key_alice=key_alice,
        key_bob=key_bob,
        key_basis=bob_basis[kept],
    )
    logger.info(f"仿真完成: 保留 {retained}/{cfg.n}, max|z|={result.max_abs_z():.3f}")
    return result


def sifting(cfg: RunConfig) -> SiftingResult:
    """运行一次并报告筛选比例；单分量制备配合 Bob 随机基时比例趋于 1/2"""
    result = run(cfg)
    return SiftingResult(
        retained=int(round(result.retained_fraction * cfg.n)),
        n=cfg.n,
        fraction=result.retained_fraction,
        stderr=result.retained_stderr,
        v_ba_hat=result.v_ba_hat,
    )


@dataclass
class EquivalenceResult:
    """两个制备黑盒的协方差对比"""
    labels: Tuple[str, ...]
    epr_cov: np.ndarray
    direct_cov: np.ndarray
    z_scores: np.ndarray

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))

    def passed(self, z_gate: float = Z_GATE) -> bool:
        return self.max_abs_z <= z_gate


def blackbox_equivalence(prep: PreparationConfig, n: int, seed: int, n0: N0Like = None,
                         workers: int = 1, stream: Sequence[int] = ()) -> EquivalenceResult:
    """比较 EPR 黑盒与直接调制黑盒给出的 (Q_A, P_A, Q, P) 经验协方差

    协方差元素估计量的方差取 (c_ii·c_jj + c_ij²)/n（解析协方差代入）。
    """
    unit = n0_value(n0)
    analytic = prepared_ensemble(prep, unit).cov
    via_epr = prepare_via_epr(prep, n, seed, n0=unit, workers=workers, stream=stream)
    direct = prepare_direct(prep, n, seed, n0=unit, workers=workers, stream=stream)
    cov_epr = np.nan_to_num(via_epr.batch.data).T @ np.nan_to_num(via_epr.batch.data) / n
    cov_direct = np.nan_to_num(direct.batch.data).T @ np.nan_to_num(direct.batch.data) / n
    diag = np.diag(analytic)
    variance = 2.0 * (np.outer(diag, diag) + analytic ** 2) / n
    stderr = np.sqrt(variance)
    diff = cov_epr - cov_direct
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(stderr > 0, diff / np.where(stderr > 0, stderr, 1.0),
                     np.where(np.abs(diff) > 0, np.inf, 0.0))
    return EquivalenceResult(via_epr.batch.labels, cov_epr, cov_direct, z)


@dataclass(frozen=True)
class GridPoint:
    """扫描网格中的一个点；给出 s 时换算成联合测量的 μ"""
    g: float
    eps: float
    v: float
    mu: Optional[float] = 1.0
    s: Optional[float] = None

    def prep_config(self) -> PreparationConfig:
        mu = self.mu
        if self.s is not None:
            if self.s > self.v:
                raise DomainError(f"压缩因子必须在 [1/V, V] 内: s={self.s}, V={self.v}")
            if self.s == self.v:
                logger.warning(f"s=V={self.v} 对应 μ→∞，按 μ={MU_LIMIT:g} 截断")
                mu = MU_LIMIT
            else:
                mu = min((self.s * self.v - 1.0) / (self.v - self.s), MU_LIMIT)
        return PreparationConfig(self.v, JOINT, mu=mu)


def build_grid(g_values: Sequence[float], eps_values: Sequence[float], v_values: Sequence[float],
               mu_values: Sequence[float] = (1.0,)) -> List[GridPoint]:
    """笛卡尔积网格，顺序为 g 最外层"""
    return [GridPoint(g, eps, v, mu)
            for g, eps, v, mu in itertools.product(g_values, eps_values, v_values, mu_values)]


def format_cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class SweepTable:
    """扫描结果表，每个网格点一行"""
    rows: List[Dict]
    z_gate: float = Z_GATE

    @property
    def all_passed(self) -> bool:
        return not any(row['flagged'] for row in self.rows)

    @property
    def flagged_rows(self) -> int:
        return sum(1 for row in self.rows if row['flagged'])

    def to_csv(self) -> str:
        """固定列顺序的 CSV 文本，空单元格表示 null"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(SWEEP_COLUMNS)
        for row in self.rows:
            writer.writerow([format_cell(row[column]) for column in SWEEP_COLUMNS])
        return buffer.getvalue()


def sweep_row(index: int, point: GridPoint, result: RunResult, z_gate: float = Z_GATE,
              analytic_bias: float = 0.0) -> Dict:
    row = {'index': index, 'g': point.g, 'eps': point.eps, 'v': point.v,
           'mu': result.config.prep.mu}
    max_z = 0.0
    for q in QUANTITIES:
        comparison = result.comparisons.get(q)
        if comparison is None:
            row.update({f"{q}_analytic": None, f"{q}_empirical": None,
                        f"{q}_stderr": None, f"{q}_z": None})
            continue
        if analytic_bias:
            comparison = comparison.biased(analytic_bias)
        row.update({f"{q}_analytic": comparison.analytic, f"{q}_empirical": comparison.empirical,
                    f"{q}_stderr": comparison.stderr, f"{q}_z": comparison.z})
        max_z = max(max_z, abs(comparison.z))
    row['max_abs_z'] = max_z
    row['flagged'] = max_z > z_gate
    return row


def sweep(grid: Sequence[GridPoint], template: RunConfig, z_gate: float = Z_GATE,
          workers: int = 1, analytic_bias: float = 0.0) -> SweepTable:
    """在网格上逐点运行仿真，|z| > z_gate 的行被标记

    Args:
        grid: 网格点
        template: 除 prep / channel / grid_index 外的公共参数
        z_gate: 判定阈值
        workers: 并行处理网格点的线程数
        analytic_bias: 对解析值施加的相对偏差（反向对照用，正常为 0）
    """
    if not grid:
        raise DomainError("扫描网格为空")
    results: Dict[int, Dict] = {}
    errors: Dict[int, Exception] = {}
    lock = threading.Lock()

    def run_points(worker_index: int):
        for index in range(worker_index, len(grid), workers):
            point = grid[index]
            try:
                cfg = replace(template, prep=point.prep_config(),
                              channel=ChannelModel.from_excess_noise(point.g, point.eps),
                              grid_index=index)
                row = sweep_row(index, point, run(cfg), z_gate, analytic_bias)
                with lock:
                    results[index] = row
            except Exception as e:
                logger.error(f"网格点 {index} 仿真失败: {e}")
                with lock:
                    errors[index] = e

    workers = max(1, min(int(workers), len(grid)))
    if workers == 1:
        run_points(0)
    else:
        threads = [threading.Thread(target=run_points, args=(w,)) for w in range(workers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
    if errors:
        raise errors[min(errors)]

    table = SweepTable([results[i] for i in range(len(grid))], z_gate)
    logger.info(f"扫描完成: {len(grid)} 个网格点, 标记 {table.flagged_rows} 个")
    return table
