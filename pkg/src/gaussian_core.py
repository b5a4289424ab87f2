"""
高斯线性代数核心模块

所有方差以散粒噪声 N0 为单位（[Q,P] = 2iN0 约定），提供：
- 协方差记账（GaussianEnsemble）
- 分束器混合、一般线性变换
- 条件方差（解析与最小二乘经验估计）
- 可复现的分块并行高斯采样
"""
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, UnphysicalStateError

logger = logging.getLogger(__name__)

# 半正定容差（相对于最大对角元）
PSD_TOLERANCE = 1e-9
# 采样分块大小：块边界只由 n 决定，因此结果与并行线程数无关
CHUNK_SIZE = 1 << 16

EPR_LABELS = ("Q'", "P'", "Q", "P")


@dataclass(frozen=True)
class ShotNoise:
    """散粒噪声方差单位 N0"""
    n0: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.n0) and self.n0 > 0):
            raise DomainError(f"散粒噪声单位必须为正数: {self.n0}")

    def to_units(self, ratio: float) -> float:
        """无量纲比值 -> 以 n0 为单位的方差"""
        return ratio * self.n0

    def from_units(self, variance: float) -> float:
        """方差 -> 无量纲比值"""
        return variance / self.n0


N0Like = Union[ShotNoise, float, int, None]


def n0_value(n0: N0Like) -> float:
    """把 ShotNoise / 数值 / None 统一成浮点数 n0"""
    if n0 is None:
        return ShotNoise().n0
    if isinstance(n0, ShotNoise):
        return n0.n0
    return ShotNoise(float(n0)).n0


class Conditional(NamedTuple):
    """解析条件方差"""
    value: float
    degenerate: bool


class EmpiricalConditional(NamedTuple):
    """经验条件方差（带标准误差）"""
    value: float
    stderr: float
    degenerate: bool
    dof: int


@dataclass
class GaussianEnsemble:
    """一组正交分量的均值向量和协方差矩阵

    Attributes:
        labels: 正交分量名称（有序）
        mean: 均值向量（√n0 单位）
        cov: 协方差矩阵（n0 单位）
    """
    labels: Tuple[str, ...]
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        k = len(self.labels)
        if len(set(self.labels)) != k:
            raise DomainError(f"标签重复: {self.labels}")
        if self.mean.shape != (k,) or self.cov.shape != (k, k):
            raise DomainError(
                f"维度不一致: labels={k}, mean={self.mean.shape}, cov={self.cov.shape}")
        scale = self._scale()
        if not np.all(np.isfinite(self.cov)):
            raise UnphysicalStateError("协方差矩阵包含非有限值")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > PSD_TOLERANCE * scale:
            raise UnphysicalStateError("协方差矩阵不对称")
        self.cov = 0.5 * (self.cov + self.cov.T)
        if k:
            smallest = float(np.linalg.eigvalsh(self.cov)[0])
            if smallest < -PSD_TOLERANCE * scale:
                raise UnphysicalStateError(
                    f"协方差矩阵不是半正定的 (最小特征值 {smallest:.3e})")

    def _scale(self) -> float:
        if not self.labels:
            return 1.0
        return max(float(np.max(np.abs(np.diag(self.cov)))), 1e-300)

    @property
    def dimension(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        """返回标签所在位置"""
        try:
            return self.labels.index(label)
        except ValueError:
            raise DomainError(f"未知的正交分量标签: {label}") from None

    def indices(self, labels: Sequence[str]) -> List[int]:
        return [self.index(label) for label in labels]

    def variance(self, label: str) -> float:
        i = self.index(label)
        return float(self.cov[i, i])

    def covariance(self, a: str, b: str) -> float:
        return float(self.cov[self.index(a), self.index(b)])

    def marginal(self, labels: Sequence[str]) -> 'GaussianEnsemble':
        """取部分正交分量的边缘分布"""
        idx = self.indices(labels)
        return GaussianEnsemble(tuple(labels), self.mean[idx], self.cov[np.ix_(idx, idx)])

    def relabel(self, mapping: Dict[str, str]) -> 'GaussianEnsemble':
        for label in mapping:
            self.index(label)
        labels = tuple(mapping.get(label, label) for label in self.labels)
        return GaussianEnsemble(labels, self.mean.copy(), self.cov.copy())

    def scaled(self, factor: float) -> 'GaussianEnsemble':
        """把 n0 换成 factor·n0：方差乘以 factor，均值乘以 √factor"""
        if factor <= 0:
            raise DomainError(f"缩放因子必须为正数: {factor}")
        return GaussianEnsemble(self.labels, self.mean * math.sqrt(factor), self.cov * factor)

    def direct_sum(self, other: 'GaussianEnsemble') -> 'GaussianEnsemble':
        """两个相互独立的系综拼接"""
        overlap = set(self.labels) & set(other.labels)
        if overlap:
            raise DomainError(f"直和的标签冲突: {sorted(overlap)}")
        k1, k2 = self.dimension, other.dimension
        cov = np.zeros((k1 + k2, k1 + k2))
        cov[:k1, :k1] = self.cov
        cov[k1:, k1:] = other.cov
        return GaussianEnsemble(self.labels + other.labels,
                                np.concatenate([self.mean, other.mean]), cov)

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'labels': list(self.labels),
            'mean': self.mean.tolist(),
            'cov': self.cov.tolist(),
        }

    @staticmethod
    def from_dict(data: Dict) -> 'GaussianEnsemble':
        """从字典创建"""
        return GaussianEnsemble(tuple(data['labels']), np.array(data['mean']), np.array(data['cov']))


def diagonal_ensemble(labels: Sequence[str], variances: Sequence[float],
                      n0: N0Like = None) -> GaussianEnsemble:
    """相互独立、零均值的正交分量，variances 以 n0 为单位给出"""
    unit = n0_value(n0)
    variances = np.asarray(variances, dtype=float)
    if variances.shape != (len(labels),):
        raise DomainError("方差个数与标签个数不一致")
    if np.any(variances < 0):
        raise UnphysicalStateError(f"方差不能为负: {variances}")
    return GaussianEnsemble(tuple(labels), np.zeros(len(labels)), np.diag(variances * unit))


def vacuum_ensemble(labels: Sequence[str], n0: N0Like = None) -> GaussianEnsemble:
    """真空态：每个正交分量方差为 n0"""
    return diagonal_ensemble(labels, np.ones(len(labels)), n0)


def epr_ensemble(v: float, n0: N0Like = None,
                 labels: Sequence[str] = EPR_LABELS) -> GaussianEnsemble:
    """双模 EPR 态 (Q', P', Q, P)

    Q 与 Q' 正关联、P 与 P' 反关联，⟨Q'Q⟩ = +√(V²−1)·n0，⟨P'P⟩ = −√(V²−1)·n0。

    Args:
        v: 调制方差 V ≥ 1
        n0: 散粒噪声单位
        labels: 四个正交分量的名称，顺序为 (Q', P', Q, P)
    """
    if not v >= 1:
        raise DomainError(f"调制方差不能小于真空噪声: V={v}")
    if len(labels) != 4:
        raise DomainError("EPR 系综需要四个标签")
    unit = n0_value(n0)
    c = math.sqrt(v * v - 1.0)
    cov = np.diag([v, v, v, v]).astype(float)
    cov[0, 2] = cov[2, 0] = c
    cov[1, 3] = cov[3, 1] = -c
    return GaussianEnsemble(tuple(labels), np.zeros(4), cov * unit)


def apply_linear(e: GaussianEnsemble, inputs: Sequence[str], matrix: np.ndarray,
                 outputs: Optional[Sequence[str]] = None) -> GaussianEnsemble:
    """对部分正交分量做线性变换 x -> M·x，其余分量不变

    Args:
        e: 输入系综
        inputs: 参与变换的标签
        matrix: k×k 变换矩阵
        outputs: 输出标签（按位置替换 inputs），默认沿用输入标签
    """
    matrix = np.asarray(matrix, dtype=float)
    idx = e.indices(inputs)
    k = len(idx)
    if len(set(idx)) != k:
        raise DomainError(f"输入标签重复: {inputs}")
    if matrix.shape != (k, k):
        raise DomainError(f"变换矩阵形状应为 {(k, k)}: {matrix.shape}")
    full = np.eye(e.dimension)
    full[np.ix_(idx, idx)] = matrix
    labels = list(e.labels)
    if outputs is not None:
        if len(outputs) != k:
            raise DomainError("输出标签个数与输入不一致")
        for i, label in zip(idx, outputs):
            labels[i] = label
    return GaussianEnsemble(tuple(labels), full @ e.mean, full @ e.cov @ full.T)


def beamsplitter_matrix(t: float) -> np.ndarray:
    """透过率 t 的分束器：(x1, x2) -> (√t·x1 + √(1−t)·x2, √t·x2 − √(1−t)·x1)"""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"透过率必须在 [0, 1] 内: {t}")
    a, b = math.sqrt(t), math.sqrt(1.0 - t)
    return np.array([[a, b], [-b, a]])


def beamsplitter(e: GaussianEnsemble, in1: str, in2: str, t: float,
                 out1: Optional[str] = None, out2: Optional[str] = None) -> GaussianEnsemble:
    """分束器混合两个正交分量，输出替换原来的两个分量"""
    if in1 == in2:
        raise DomainError(f"分束器的两个输入必须不同: {in1}")
    outputs = None
    if out1 is not None or out2 is not None:
        outputs = (out1 or in1, out2 or in2)
    return apply_linear(e, (in1, in2), beamsplitter_matrix(t), outputs)


def condition_on(e: GaussianEnsemble, target: str, given: Sequence[str]) -> Conditional:
    """条件方差 Var(target) − c·Σ⁻¹·cᵀ

    Σ 奇异时使用伪逆并标记 degenerate=True。
    """
    given = list(given)
    if target in given:
        raise DomainError(f"目标分量不能出现在条件集合中: {target}")
    t = e.index(target)
    var = float(e.cov[t, t])
    if not given:
        return Conditional(var, False)
    g = e.indices(given)
    sigma = e.cov[np.ix_(g, g)]
    c = e.cov[t, g]
    scale = max(float(np.max(np.abs(np.diag(sigma)))), 1e-300)
    rank = np.linalg.matrix_rank(sigma, tol=PSD_TOLERANCE * scale, hermitian=True)
    degenerate = rank < len(g)
    if degenerate:
        logger.warning(f"条件集合 {given} 的协方差奇异，使用伪逆")
        explained = float(c @ np.linalg.pinv(sigma, rcond=PSD_TOLERANCE, hermitian=True) @ c)
    else:
        explained = float(c @ np.linalg.solve(sigma, c))
    return Conditional(max(var - explained, 0.0), degenerate)


def symmetric_factor(cov: np.ndarray) -> np.ndarray:
    """对称特征分解得到 L，使 L·Lᵀ = cov；高于 −1e-9（相对）的负特征值截断为 0"""
    cov = np.asarray(cov, dtype=float)
    if cov.size == 0:
        return cov.copy()
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    if eigenvalues[0] < -PSD_TOLERANCE * scale:
        raise UnphysicalStateError(
            f"协方差矩阵不是半正定的 (最小特征值 {eigenvalues[0]:.3e})")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return eigenvectors * np.sqrt(eigenvalues)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """由 (seed, keys...) 派生独立的随机子流"""
    if seed < 0 or any(k < 0 for k in keys):
        raise DomainError(f"种子和子流编号必须为非负整数: {seed}, {keys}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(sequence))


@dataclass
class SampleBatch:
    """一批采样数据

    Attributes:
        labels: 列名
        data: n×k 样本矩阵
        seed: 生成时使用的种子
        n: 样本数
    """
    labels: Tuple[str, ...]
    data: np.ndarray
    seed: int
    n: int = field(default=-1)

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != len(self.labels):
            raise DomainError(f"样本矩阵形状 {self.data.shape} 与标签 {self.labels} 不一致")
        if self.n < 0:
            self.n = self.data.shape[0]
        if self.data.shape[0] != self.n:
            raise DomainError(f"样本行数 {self.data.shape[0]} 与 n={self.n} 不一致")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DomainError(f"样本中没有该列: {label}") from None

    def column(self, label: str) -> np.ndarray:
        return self.data[:, self.index(label)]

    def columns(self, labels: Sequence[str]) -> np.ndarray:
        return self.data[:, [self.index(label) for label in labels]]

    def select(self, labels: Sequence[str]) -> 'SampleBatch':
        return SampleBatch(tuple(labels), self.columns(labels), self.seed)

    def subset(self, rows: np.ndarray) -> 'SampleBatch':
        """按行掩码或行号取子集"""
        return SampleBatch(self.labels, self.data[rows], self.seed)

    def with_columns(self, labels: Sequence[str], values: Sequence[np.ndarray]) -> 'SampleBatch':
        """追加派生列"""
        extra = np.column_stack([np.asarray(v, dtype=float) for v in values])
        return SampleBatch(self.labels + tuple(labels), np.hstack([self.data, extra]), self.seed)

    def joined(self, other: 'SampleBatch') -> 'SampleBatch':
        """按列拼接同样行数的另一批样本"""
        if other.n != self.n:
            raise DomainError(f"行数不一致: {self.n} != {other.n}")
        return SampleBatch(self.labels + other.labels, np.hstack([self.data, other.data]), self.seed)

    def mix(self, in1: str, in2: str, t: float,
            out1: Optional[str] = None, out2: Optional[str] = None) -> 'SampleBatch':
        """对两列样本施加与 beamsplitter 相同的变换"""
        i, j = self.index(in1), self.index(in2)
        if i == j:
            raise DomainError(f"分束器的两个输入必须不同: {in1}")
        m = beamsplitter_matrix(t)
        data = self.data.copy()
        x1, x2 = self.data[:, i], self.data[:, j]
        data[:, i] = m[0, 0] * x1 + m[0, 1] * x2
        data[:, j] = m[1, 0] * x1 + m[1, 1] * x2
        labels = list(self.labels)
        labels[i] = out1 or in1
        labels[j] = out2 or in2
        return SampleBatch(tuple(labels), data, self.seed)


def chunk_bounds(n: int, chunk_size: int = CHUNK_SIZE) -> List[Tuple[int, int]]:
    """把 [0, n) 切成固定大小的块"""
    return [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def sample(e: GaussianEnsemble, n: int, seed: int, workers: int = 1,
           stream: Sequence[int] = ()) -> SampleBatch:
    """从 N(mean, cov) 独立采样 n 行

    第 i 块使用子流 derive_rng(seed, *stream, i)，块边界固定，
    因此无论 workers 取多少，结果逐位相同。

    Args:
        e: 高斯系综
        n: 样本数
        seed: 种子
        workers: 并行线程数
        stream: 额外的子流键（例如网格点编号），用于区分同一种子下的不同用途
    """
    if n < 1:
        raise DomainError(f"样本数至少为 1: {n}")
    factor = symmetric_factor(e.cov)
    k = e.dimension
    data = np.empty((n, k))
    bounds = chunk_bounds(n)
    errors: Dict[int, Exception] = {}
    lock = threading.Lock()

    def fill_chunks(worker_index: int):
        for chunk_index in range(worker_index, len(bounds), workers):
            start, stop = bounds[chunk_index]
            try:
                rng = derive_rng(seed, *stream, chunk_index)
                z = rng.standard_normal((stop - start, k))
                data[start:stop] = e.mean + z @ factor.T
            except Exception as exc:
                with lock:
                    errors[chunk_index] = exc
                return

    workers = max(1, min(int(workers), len(bounds)))
    if workers == 1:
        fill_chunks(0)
    else:
        threads = [threading.Thread(target=fill_chunks, args=(w,)) for w in range(workers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
    if errors:
        raise errors[min(errors)]
    logger.debug(f"采样完成: n={n}, k={k}, 分块={len(bounds)}, 线程={workers}")
    return SampleBatch(e.labels, data, seed)


def empirical_conditional_variance(b: SampleBatch, target: str,
                                   given: Sequence[str]) -> EmpiricalConditional:
    """最小二乘回归残差方差（无截距，分母 n−|given|）

    标准误差取卡方近似 value·√(2/(n−|given|))。
    """
    given = list(given)
    k = len(given)
    if b.n < max(10 * k, 2):
        raise DomainError(f"样本数不足: n={b.n}, 条件变量个数={k}")
    y = b.column(target)
    dof = b.n - k
    if not given:
        value = float(y @ y) / dof
        return EmpiricalConditional(value, value * math.sqrt(2.0 / dof), False, dof)
    x = b.columns(given)
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    degenerate = rank < k
    if degenerate:
        logger.warning(f"回归变量 {given} 秩亏 ({rank}/{k})，使用伪逆拟合")
    residual = y - x @ coef
    value = float(residual @ residual) / dof
    return EmpiricalConditional(value, value * math.sqrt(2.0 / dof), bool(degenerate), dof)


def empirical_ensemble(b: SampleBatch) -> GaussianEnsemble:
    """零均值假设下的经验协方差 XᵀX/n"""
    cov = b.data.T @ b.data / b.n
    return GaussianEnsemble(b.labels, np.zeros(len(b.labels)), cov)


def gaussian_mutual_information(variance: float, conditional_variance: float) -> float:
    """高斯信道的香农互信息 ½·log2(Var/V_cond)，单位 bit"""
    if variance <= 0:
        return 0.0
    if conditional_variance <= 0:
        return math.inf
    return max(0.5 * math.log2(variance / conditional_variance), 0.0)
