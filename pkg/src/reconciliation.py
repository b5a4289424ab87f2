"""
密钥协调模块

把相关的实数密钥元素变成双方相同的二进制密钥：
1. 公开牺牲一部分符号估计信道 (G, χ)
2. 以参考方的分位数切片并 Gray 编码
3. 按区间编号的自然二进制位从最低位开始逐层：非参考方用自己的实数值和已协调的低位
   算出本层的对数似然比；信息量过高的层整层公开，其余层由参考方公开随机分块的奇偶位，
   非参考方做置信传播软判决译码，剩余错误用 Cascade 二分查找纠正
4. Toeplitz 哈希做隐私放大

反向协调 (RR) 以 Bob 为参考，Alice 修改自己的数据；正向协调 (DR) 相反。
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr, erfinv, expit, ndtr

from errors import DomainError, SecurityAbort
from gaussian_core import derive_rng
from message_log import MessageLog
from preparation import JOINT
from security_analysis import delta_i_rr, dr_secure, mutual_info_ba, mutual_info_be_rr
from simulation_harness import RunResult

logger = logging.getLogger(__name__)

DIRECTIONS = ('RR', 'DR')
KEY_FORMATS = ('raw', 'hex')
MAX_SLICES = 8

CONFIDENCE = 0.99
# g 置信区间半宽与估计值之比超过该值时标记为不可靠
TARGET_RELATIVE_CI = 0.1
# 平均后验熵（bit）超过该值的层整层公开
DISCLOSE_ENTROPY = 0.8
VERIFY_BITS = 64
MAX_EXTRA_PASSES = 4
MIN_ERROR_RATE = 1e-4
# Cascade 首轮块长 ≈ 0.73/p
BLOCK_CONSTANT = 0.73
# 未给出误码率时首轮的块长，由奇偶不一致的块所占比例反推误码率
SAMPLE_BLOCK = 32
DECISION_CHUNK = 8192

# 软判决译码：首批 SOFT_PASSES 轮共约 SOFT_START·H·n 个奇偶位，不收敛时每次追加 SOFT_STEP·H·n 个
SOFT_PASSES = 3
SOFT_START = 1.1
SOFT_STEP = 0.03
SOFT_ITERATIONS = 60
SOFT_WARM_ITERATIONS = 30
LLR_LIMIT = 30.0

STREAM_SACRIFICE = 31
STREAM_CASCADE = 32
STREAM_PRIVACY = 33
STREAM_SOFT = 34


# ---------------------------------------------------------------- 信道估计

@dataclass
class ChannelEstimate:
    """由牺牲子集估计的信道参数

    Attributes:
        g_hat / chi_hat: 增益与附加噪声（无量纲）
        g_ci / chi_ci: 置信区间
        eps_hat: 过量噪声 χ − (1−G)/G
        sacrificed_fraction: 公开的符号比例
        sacrificed_indices / key_indices: 公开随机数选出的子集（升序）
        reliable: g 的置信区间是否达到目标精度
    """
    g_hat: float
    chi_hat: float
    g_ci: Tuple[float, float]
    chi_ci: Tuple[float, float]
    eps_hat: float
    sacrificed_fraction: float
    sacrificed_indices: np.ndarray = field(repr=False)
    key_indices: np.ndarray = field(repr=False)
    reliable: bool = True

    def to_dict(self) -> Dict:
        return {
            'g_hat': self.g_hat,
            'chi_hat': self.chi_hat,
            'g_ci': list(self.g_ci),
            'chi_ci': list(self.chi_ci),
            'eps_hat': self.eps_hat,
            'sacrificed_fraction': self.sacrificed_fraction,
            'sacrificed': int(len(self.sacrificed_indices)),
            'reliable': self.reliable,
        }


def estimate_channel(alice_values, bob_values, sacrificed_fraction: float, seed: int,
                     prep_noise: Union[float, np.ndarray] = 1.0,
                     n0: float = 1.0) -> ChannelEstimate:
    """公开一部分符号并估计信道

    斜率 b = Σxy/Σx²，G = b²；残差方差 G(χ + s)·n0 扣除 Alice 的制备噪声 s 得到 χ。

    Args:
        alice_values / bob_values: 双方的实数密钥元素（n0 单位）
        sacrificed_fraction: 公开比例，(0, 0.5]
        seed: 公开随机数种子
        prep_noise: Alice 的条件方差 s（无量纲，可逐符号给出）
        n0: 散粒噪声单位
    """
    alice = np.asarray(alice_values, dtype=float)
    bob = np.asarray(bob_values, dtype=float)
    if alice.shape != bob.shape or alice.ndim != 1:
        raise DomainError(f"双方数据长度不一致: {alice.shape} / {bob.shape}")
    if not 0 < sacrificed_fraction <= 0.5:
        raise DomainError(f"公开比例必须在 (0, 0.5] 内: {sacrificed_fraction}")
    n = alice.shape[0]
    k = int(round(sacrificed_fraction * n))
    if k < 3 or k >= n:
        raise DomainError(f"公开的符号数不合适: {k}/{n}")

    perm = derive_rng(seed, STREAM_SACRIFICE).permutation(n)
    sacrificed = np.sort(perm[:k])
    key_indices = np.sort(perm[k:])
    x, y = alice[sacrificed], bob[sacrificed]
    sxx = float(x @ x)
    if sxx <= 0:
        raise DomainError("Alice 的公开数据全为 0，无法估计信道")
    slope = float(x @ y) / sxx
    residual = y - slope * x
    dof = k - 1
    sigma2 = float(residual @ residual) / dof
    g_hat = slope * slope
    if g_hat <= 0:
        raise DomainError("估计的信道增益为 0")

    noise = np.broadcast_to(np.asarray(prep_noise, dtype=float), alice.shape)[sacrificed]
    chi_hat = sigma2 / (g_hat * n0) - float(np.mean(noise))
    se_slope = math.sqrt(sigma2 / sxx)
    se_g = 2.0 * abs(slope) * se_slope
    se_sigma2 = sigma2 * math.sqrt(2.0 / dof)
    se_chi = math.hypot(se_sigma2 / (g_hat * n0), sigma2 / (g_hat * g_hat * n0) * se_g)
    z = math.sqrt(2.0) * float(erfinv(CONFIDENCE))

    reliable = z * se_g <= TARGET_RELATIVE_CI * g_hat
    if not reliable:
        logger.warning(f"信道增益估计不够精确: G={g_hat:.4g} ± {z * se_g:.2g}，"
                       f"可增大公开比例或符号数")
    estimate = ChannelEstimate(
        g_hat=g_hat,
        chi_hat=chi_hat,
        g_ci=(g_hat - z * se_g, g_hat + z * se_g),
        chi_ci=(chi_hat - z * se_chi, chi_hat + z * se_chi),
        eps_hat=chi_hat - (1.0 - g_hat) / g_hat,
        sacrificed_fraction=sacrificed_fraction,
        sacrificed_indices=sacrificed,
        key_indices=key_indices,
        reliable=reliable,
    )
    logger.info(f"信道估计: G={g_hat:.5g}, χ={chi_hat:.5g}, ε={estimate.eps_hat:.4g} (公开 {k}/{n})")
    return estimate


# ---------------------------------------------------------------- 切片

def _check_slices(m: int):
    if not 1 <= m <= MAX_SLICES:
        raise DomainError(f"切片数必须在 [1, {MAX_SLICES}] 内: {m}")


def quantile_boundaries(reference_values, m: int) -> np.ndarray:
    """参考方边缘分布的 2^m 等分位点（2^m − 1 个边界）"""
    _check_slices(m)
    bins = 1 << m
    return np.quantile(np.asarray(reference_values, dtype=float), np.arange(1, bins) / bins)


def gray_code(values):
    return np.bitwise_xor(values, np.right_shift(values, 1))


def gray_decode(codes):
    result = np.array(codes, dtype=np.int64)
    shift = result >> 1
    while np.any(shift):
        result ^= shift
        shift >>= 1
    return result


def slice_values(values, m: int, boundaries: Optional[np.ndarray] = None) -> np.ndarray:
    """每个值所在分位区间的 m 位 Gray 码"""
    _check_slices(m)
    values = np.asarray(values, dtype=float)
    if boundaries is None:
        boundaries = quantile_boundaries(values, m)
    boundaries = np.asarray(boundaries, dtype=float)
    if boundaries.shape != ((1 << m) - 1,):
        raise DomainError(f"边界个数应为 {(1 << m) - 1}: {boundaries.shape}")
    if np.any(np.diff(boundaries) < 0):
        raise DomainError("切片边界必须单调不减")
    bins = np.searchsorted(boundaries, values, side='right')
    return gray_code(bins.astype(np.int64))


def level_bits(codes, level: int) -> np.ndarray:
    return ((np.asarray(codes, dtype=np.int64) >> level) & 1).astype(np.int8)


def set_level(codes, level: int, bits) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return (codes & ~np.int64(1 << level)) | (np.asarray(bits, dtype=np.int64) << level)


def _interval_probabilities(estimate: np.ndarray, sigma: float, edges: np.ndarray) -> np.ndarray:
    """N(estimate, sigma²) 落在各区间的概率，上尾用互补分布函数计算"""
    z = (edges[None, :] - estimate[:, None]) / sigma
    lower = np.diff(ndtr(z), axis=1)
    upper = -np.diff(ndtr(-z), axis=1)
    return np.where(z[:, :-1] > 0, upper, lower)


def level_llr(estimate, sigma: float, boundaries: np.ndarray, known_bins, level: int,
              m: int) -> np.ndarray:
    """区间编号第 level 位的对数似然比 ln P(0)/P(1)

    参考方的值服从 N(estimate, sigma²)，只保留低 level 位与 known_bins 相同的区间。
    结果截断到 ±LLR_LIMIT。
    """
    estimate = np.asarray(estimate, dtype=float)
    bins = np.arange(1 << m, dtype=np.int64)
    low_mask = (1 << level) - 1
    is_one = ((bins >> level) & 1) == 1
    edges = np.concatenate([[-np.inf], np.asarray(boundaries, dtype=float), [np.inf]])
    known_low = np.asarray(known_bins, dtype=np.int64) & low_mask
    sigma = max(float(sigma), 1e-12)
    tiny = np.finfo(float).tiny
    out = np.empty(estimate.shape[0])
    for start in range(0, estimate.shape[0], DECISION_CHUNK):
        stop = min(start + DECISION_CHUNK, estimate.shape[0])
        probs = _interval_probabilities(estimate[start:stop], sigma, edges)
        probs *= (bins[None, :] & low_mask) == known_low[start:stop, None]
        p_one = np.maximum(probs[:, is_one].sum(axis=1), tiny)
        p_zero = np.maximum(probs[:, ~is_one].sum(axis=1), tiny)
        out[start:stop] = np.log(p_zero) - np.log(p_one)
    return np.clip(out, -LLR_LIMIT, LLR_LIMIT)


def soft_decisions(estimate, sigma: float, boundaries: np.ndarray, known_bins, level: int,
                   m: int) -> np.ndarray:
    """在已知低位 (< level) 的条件下对区间编号第 level 位做最大后验判决"""
    return (level_llr(estimate, sigma, boundaries, known_bins, level, m) < 0).astype(np.int8)


def soft_entropy(llr) -> float:
    """后验分布的平均二元熵（bit/比特），即纠错至少要公开的信息量"""
    p = expit(-np.abs(np.asarray(llr, dtype=float)))
    return float(np.mean(entr(p) + entr(1.0 - p)) / math.log(2.0))


# ---------------------------------------------------------------- 纠错

def key_hash(bits) -> str:
    """比特串的 SHA-256（含长度），用于公开验证"""
    raw = np.asarray(bits, dtype=np.uint8)
    payload = len(raw).to_bytes(8, 'big') + np.packbits(raw).tobytes()
    return hashlib.sha256(payload).hexdigest()


def initial_block_size(error_rate: float, n: int) -> int:
    return max(1, min(n, math.ceil(BLOCK_CONSTANT / max(error_rate, MIN_ERROR_RATE))))


def estimate_error_rate(mismatch_fraction: float, block_size: int) -> float:
    """由奇偶不一致的块所占比例 r 反推误码率

    长为 k 的块含奇数个错误的概率为 (1 − (1−2p)^k)/2；r ≥ 0.5 时返回 0.5。
    """
    if not 0.0 <= mismatch_fraction <= 1.0 or block_size < 1:
        raise DomainError(f"无法估计误码率: r={mismatch_fraction}, k={block_size}")
    if mismatch_fraction >= 0.5:
        return 0.5
    return 0.5 * (1.0 - (1.0 - 2.0 * mismatch_fraction) ** (1.0 / block_size))


def _parity(bits: np.ndarray, indices: np.ndarray) -> int:
    return int(bits[indices].sum()) & 1


@dataclass
class ParityPass:
    """一次随机打乱后的分块

    Attributes:
        perm: 打乱顺序
        starts: 全部块在打乱后序列中的起点，块长相差不超过 1
        parities: 已公开的前若干块的参考方奇偶位
        messages: 校验节点发往各比特的消息（按打乱后的顺序，未覆盖的比特为 0）
    """
    perm: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    parities: np.ndarray = field(repr=False)
    messages: np.ndarray = field(repr=False)

    @property
    def blocks(self) -> int:
        return int(self.starts.shape[0])

    @property
    def revealed(self) -> int:
        return int(self.parities.shape[0])

    @property
    def covered(self) -> int:
        """已公开的块覆盖的比特数（打乱后的前缀长度）"""
        if self.revealed >= self.blocks:
            return int(self.perm.shape[0])
        return int(self.starts[self.revealed])


class SoftDecoder:
    """用参考方公开的随机分块奇偶位做置信传播译码

    每个奇偶位是一个校验节点；非参考方以自己的对数似然比为先验，
    按 tanh 规则在比特和校验之间交换消息，直到所有校验满足。
    """

    def __init__(self, ref: np.ndarray, llr: np.ndarray, rng: np.random.Generator,
                 log: MessageLog, level: int = 0):
        if ref.shape != llr.shape:
            raise DomainError(f"参考比特与似然比长度不一致: {ref.shape} / {llr.shape}")
        self.ref = ref
        self.llr = np.asarray(llr, dtype=float)
        self.rng = rng
        self.log = log
        self.level = level
        self.n = ref.shape[0]
        self.passes: List[ParityPass] = []
        self.block_count = 1
        self.parity_bits = 0
        self.bits = (self.llr < 0).astype(np.int8)

    def _add_pass(self, blocks: int) -> int:
        blocks = max(1, min(blocks, self.n))
        starts = np.arange(blocks, dtype=np.int64) * self.n // blocks
        parity_pass = ParityPass(perm=self.rng.permutation(self.n), starts=starts,
                                 parities=np.zeros(0, dtype=np.int64), messages=np.zeros(self.n))
        self.passes.append(parity_pass)
        return len(self.passes) - 1

    def _reveal(self, round_index: int, count: int) -> int:
        """公开第 round_index 轮接下来的 count 个块的奇偶位，返回实际公开的个数"""
        parity_pass = self.passes[round_index]
        first = parity_pass.revealed
        last = min(first + count, parity_pass.blocks)
        if last <= first:
            return 0
        ends = np.append(parity_pass.starts[1:], self.n)
        begin, stop = int(parity_pass.starts[first]), int(ends[last - 1])
        chunk = parity_pass.perm[begin:stop]
        bits = np.add.reduceat(self.ref[chunk].astype(np.int64),
                               parity_pass.starts[first:last] - begin) & 1
        for start, end, bit in zip(parity_pass.starts[first:last], ends[first:last], bits):
            self.log.add_parity(round_index, parity_pass.perm[start:end], bit, self.level)
        parity_pass.parities = np.concatenate([parity_pass.parities, bits])
        self.parity_bits += last - first
        return last - first

    def start(self, target: int):
        """SOFT_PASSES 轮完整分块，共约 target 个奇偶位"""
        self.block_count = max(1, min(math.ceil(target / SOFT_PASSES), self.n))
        for _ in range(SOFT_PASSES):
            self._reveal(self._add_pass(self.block_count), self.block_count)

    def extend(self, count: int):
        """再公开 count 个奇偶位，当前一轮用完时开始新的一轮"""
        while count > 0:
            round_index = len(self.passes) - 1
            if round_index < 0 or self.passes[round_index].revealed >= self.passes[round_index].blocks:
                round_index = self._add_pass(self.block_count)
            count -= self._reveal(round_index, count)

    def _totals(self) -> np.ndarray:
        total = self.llr.copy()
        for parity_pass in self.passes:
            total[parity_pass.perm] += parity_pass.messages
        return total

    def _check_messages(self, parity_pass: ParityPass, total: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        if parity_pass.revealed == 0:
            return out
        covered = parity_pass.covered
        starts = parity_pass.starts[:parity_pass.revealed]
        incoming = total[parity_pass.perm[:covered]] - parity_pass.messages[:covered]
        t = np.tanh(0.5 * incoming)
        negative = (t < 0).astype(np.int64)
        log_mag = np.log(np.maximum(np.abs(t), np.finfo(float).tiny))
        sizes = np.diff(np.append(starts, covered))
        block_negative = np.repeat(np.add.reduceat(negative, starts) + parity_pass.parities, sizes)
        block_log = np.repeat(np.add.reduceat(log_mag, starts), sizes)
        # 除去自身：符号按奇偶相减，幅度按对数相减
        sign = np.where((block_negative - negative) & 1, -1.0, 1.0)
        magnitude = np.minimum(np.exp(block_log - log_mag), 1.0 - 1e-12)
        out[:covered] = sign * 2.0 * np.arctanh(magnitude)
        return out

    def unsatisfied(self) -> int:
        """当前判决下不满足的校验数"""
        count = 0
        for parity_pass in self.passes:
            if parity_pass.revealed == 0:
                continue
            chunk = self.bits[parity_pass.perm[:parity_pass.covered]].astype(np.int64)
            parity = np.add.reduceat(chunk, parity_pass.starts[:parity_pass.revealed]) & 1
            count += int(np.count_nonzero(parity != parity_pass.parities))
        return count

    def decode(self, iterations: int) -> int:
        """洪泛调度迭代，返回不满足的校验数；消息保留，可以继续迭代"""
        unsatisfied = self.unsatisfied()
        for _ in range(iterations):
            if unsatisfied == 0:
                break
            total = self._totals()
            fresh = [self._check_messages(parity_pass, total) for parity_pass in self.passes]
            for parity_pass, messages in zip(self.passes, fresh):
                parity_pass.messages = messages
            self.bits = (self._totals() < 0).astype(np.int8)
            unsatisfied = self.unsatisfied()
        return unsatisfied

    def run(self, entropy: float) -> int:
        """先公开约 SOFT_START·H·n 个奇偶位，不收敛时逐步追加，最多 n 个"""
        self.start(math.ceil(SOFT_START * entropy * self.n))
        unsatisfied = self.decode(SOFT_ITERATIONS)
        step = max(1, math.ceil(SOFT_STEP * entropy * self.n))
        while unsatisfied and self.parity_bits < self.n:
            self.extend(min(step, self.n - self.parity_bits))
            unsatisfied = self.decode(SOFT_WARM_ITERATIONS)
        logger.debug(f"第 {self.level} 层软判决译码: H={entropy:.4f}, 公开 {self.parity_bits} "
                     f"个奇偶位 ({len(self.passes)} 轮), 不满足的校验 {unsatisfied}")
        return unsatisfied


class CascadeSession:
    """一层比特的 Cascade 纠错

    参考方比特只读，另一方原地修改。每轮随机打乱后分块，块长逐轮加倍；
    在某一轮纠正一位后，回溯所有其他轮中包含该位、奇偶变得不一致的块。
    每个公开的参考方奇偶校验位记 1 bit。

    error_rate 为 None 时首轮用 SAMPLE_BLOCK 长的块，由不一致的块数估计误码率，
    再按剩余误码率确定后续各轮的块长。round_offset 加到消息记录的轮次上。
    """

    def __init__(self, ref: np.ndarray, fix: np.ndarray, error_rate: Optional[float],
                 rng: np.random.Generator, log: MessageLog, level: int = 0,
                 round_offset: int = 0):
        if ref.shape != fix.shape:
            raise DomainError(f"双方比特串长度不一致: {ref.shape} / {fix.shape}")
        self.ref = ref
        self.fix = fix
        self.rng = rng
        self.log = log
        self.level = level
        self.round_offset = round_offset
        self.n = ref.shape[0]
        self.adaptive = error_rate is None
        self.error_rate = error_rate
        self.block0 = None if self.adaptive else initial_block_size(error_rate, self.n)
        self.passes: List[Tuple[np.ndarray, np.ndarray, int]] = []
        self.parity_bits = 0
        self.corrections = 0

    def _block_size(self, round_index: int) -> int:
        if not self.adaptive:
            return min(self.block0 << round_index, self.n)
        if round_index == 0:
            return min(SAMPLE_BLOCK, self.n)
        return min(self.block0 << (round_index - 1), self.n)

    def run_pass(self) -> int:
        """执行一轮，返回本轮公开的奇偶校验位数"""
        round_index = len(self.passes)
        logged_round = self.round_offset + round_index
        size = self._block_size(round_index)
        perm = self.rng.permutation(self.n)
        self.passes.append((perm, np.argsort(perm), size))

        starts = np.arange(0, self.n, size)
        ref_par = np.add.reduceat(self.ref[perm].astype(np.int64), starts) & 1
        fix_par = np.add.reduceat(self.fix[perm].astype(np.int64), starts) & 1
        for start, bit in zip(starts, ref_par):
            self.log.add_parity(logged_round, perm[start:start + size], bit, self.level)
        asked = len(starts)
        mismatched = starts[ref_par != fix_par]

        pending = [(round_index, int(start)) for start in mismatched]
        while pending:
            j, start = pending.pop()
            perm_j, _, size_j = self.passes[j]
            block = perm_j[start:start + size_j]
            # 块的参考奇偶已在第 j 轮公开
            if _parity(self.ref, block) == _parity(self.fix, block):
                continue
            position, cost = self._binary_search(block, logged_round)
            asked += cost
            self.fix[position] ^= 1
            self.corrections += 1
            for k, (_, inv_k, size_k) in enumerate(self.passes):
                if k != j:
                    pending.append((k, int(inv_k[position] // size_k * size_k)))

        if self.adaptive and round_index == 0:
            self.error_rate = estimate_error_rate(len(mismatched) / len(starts), size)
            remaining = max(self.error_rate - self.corrections / self.n, MIN_ERROR_RATE)
            self.block0 = initial_block_size(remaining, self.n)
            logger.debug(f"第 {self.level} 层估计误码率 {self.error_rate:.4g}，"
                         f"剩余 {remaining:.4g}，后续首轮块长 {self.block0}")
        self.parity_bits += asked
        return asked

    def _binary_search(self, block: np.ndarray, round_index: int) -> Tuple[int, int]:
        lo, hi = 0, block.shape[0]
        asked = 0
        while hi - lo > 1:
            mid = (lo + hi) // 2
            half = block[lo:mid]
            ref_bit = _parity(self.ref, half)
            self.log.add_parity(round_index, half, ref_bit, self.level)
            asked += 1
            if ref_bit != _parity(self.fix, half):
                hi = mid
            else:
                lo = mid
        return int(block[lo]), asked


class BitCorrection(NamedTuple):
    bits: np.ndarray
    parity_bits: int
    verification_bits: int
    passes: int


def _verify(ref: np.ndarray, fix: np.ndarray, log: MessageLog, level: int,
            round_index: int) -> bool:
    digest = key_hash(ref)[:VERIFY_BITS // 4]
    log.add_verification(level, digest, VERIFY_BITS, round_index)
    return digest == key_hash(fix)[:VERIFY_BITS // 4]


def reconcile_level(ref_bits, fix_bits, rounds: int, seed: int, level: int = 0,
                    error_rate: Optional[float] = None, log: Optional[MessageLog] = None,
                    llr=None) -> BitCorrection:
    """纠正一层比特，先比较验证哈希，一致则不公开任何奇偶位

    给出 llr（非参考方对参考比特的对数似然比）时先做软判决译码，哈希仍不一致时
    用 Cascade 清除残余错误，其误码率由不满足的校验数估计。没有 llr 时直接做 Cascade，
    error_rate 为 None 表示由首轮估计。
    Cascade rounds 轮后哈希仍不一致时最多追加 MAX_EXTRA_PASSES 轮，仍失败则中止。
    """
    if rounds < 1:
        raise DomainError(f"纠错轮数至少为 1: {rounds}")
    ref = np.asarray(ref_bits, dtype=np.int8)
    fix = np.array(fix_bits, dtype=np.int8)
    log = log if log is not None else MessageLog('RR', seed)
    verification = VERIFY_BITS
    if _verify(ref, fix, log, level, -1):
        return BitCorrection(fix, 0, verification, 0)

    parity_bits = 0
    soft_passes = 0
    if llr is not None:
        decoder = SoftDecoder(ref, np.asarray(llr, dtype=float),
                              derive_rng(seed, STREAM_SOFT, level), log, level)
        unsatisfied = decoder.run(soft_entropy(decoder.llr))
        fix = decoder.bits.copy()
        parity_bits = decoder.parity_bits
        soft_passes = len(decoder.passes)
        verification += VERIFY_BITS
        if _verify(ref, fix, log, level, soft_passes - 1):
            return BitCorrection(fix, parity_bits, verification, soft_passes)
        error_rate = max(unsatisfied / ref.shape[0], MIN_ERROR_RATE)
        logger.debug(f"第 {level} 层软判决译码后哈希不一致，Cascade 按误码率 {error_rate:.3g} 继续")

    cascade = CascadeSession(ref, fix, error_rate, derive_rng(seed, STREAM_CASCADE, level),
                             log, level, soft_passes)
    for _ in range(rounds):
        cascade.run_pass()
    while True:
        verification += VERIFY_BITS
        if _verify(ref, fix, log, level, soft_passes + len(cascade.passes) - 1):
            break
        if len(cascade.passes) >= rounds + MAX_EXTRA_PASSES:
            raise SecurityAbort('reconciliation_failed',
                                f"第 {level} 层在 {len(cascade.passes)} 轮后仍不一致")
        logger.debug(f"第 {level} 层验证失败，追加一轮")
        cascade.run_pass()
    logger.debug(f"第 {level} 层纠错完成: 纠正 {cascade.corrections} 位, "
                 f"公开 {cascade.parity_bits} 个奇偶位, {len(cascade.passes)} 轮")
    return BitCorrection(fix, parity_bits + cascade.parity_bits, verification,
                         soft_passes + len(cascade.passes))


class CorrectionResult(NamedTuple):
    alice_codes: np.ndarray
    bob_codes: np.ndarray
    disclosed_bits: int
    log: MessageLog


def _check_direction(direction: str):
    if direction not in DIRECTIONS:
        raise DomainError(f"未知的协调方向: {direction}")


def correct(direction: str, alice_codes, bob_codes, rounds: int = 4, slices: Optional[int] = None,
            seed: int = 0, error_rates: Optional[Sequence[float]] = None,
            log: Optional[MessageLog] = None) -> CorrectionResult:
    """逐层纠正非参考方的码字

    RR 时 Bob 的码字是参考、只修改 Alice 的；DR 相反。
    不给 error_rates 时每层的误码率由 Cascade 首轮估计。
    返回的 disclosed_bits 含奇偶位和验证哈希。
    """
    _check_direction(direction)
    alice = np.asarray(alice_codes, dtype=np.int64)
    bob = np.asarray(bob_codes, dtype=np.int64)
    if alice.shape != bob.shape:
        raise DomainError(f"双方码字长度不一致: {alice.shape} / {bob.shape}")
    m = slices or max(int(max(alice.max(initial=0), bob.max(initial=0))).bit_length(), 1)
    _check_slices(m)
    if error_rates is not None and len(error_rates) != m:
        raise DomainError(f"误码率个数 {len(error_rates)} 与切片数 {m} 不一致")
    log = log if log is not None else MessageLog(direction, seed)
    ref, corrected = (bob, alice.copy()) if direction == 'RR' else (alice, bob.copy())

    disclosed = 0
    for level in range(m):
        rate = None if error_rates is None else error_rates[level]
        result = reconcile_level(level_bits(ref, level), level_bits(corrected, level),
                                 rounds, seed, level, rate, log)
        corrected = set_level(corrected, level, result.bits)
        disclosed += result.parity_bits + result.verification_bits

    if direction == 'RR':
        return CorrectionResult(corrected, bob, disclosed, log)
    return CorrectionResult(alice, corrected, disclosed, log)


# ---------------------------------------------------------------- 隐私放大

def toeplitz_hash(bits, output_length: int, seed: int) -> np.ndarray:
    """GF(2) 上的 Toeplitz 矩阵乘法 T[i, j] = seq[i − j + n − 1]，用 FFT 卷积计算"""
    raw = np.asarray(bits, dtype=np.uint8)
    n = raw.shape[0]
    if not 1 <= output_length <= n:
        raise DomainError(f"输出长度必须在 [1, {n}] 内: {output_length}")
    seq = derive_rng(seed, STREAM_PRIVACY).integers(0, 2, size=n + output_length - 1,
                                                    dtype=np.uint8)
    size = 1
    while size < seq.shape[0] + n - 1:
        size <<= 1
    product = np.fft.rfft(seq.astype(np.float64), n=size) * np.fft.rfft(raw.astype(np.float64), n=size)
    conv = np.fft.irfft(product, n=size)
    return (np.rint(conv[n - 1:n - 1 + output_length]).astype(np.int64) & 1).astype(np.uint8)


def privacy_amplify(bits, eve_info_bits: float, security_margin_bits: int = 64, seed: int = 0,
                    input_entropy: Optional[float] = None) -> np.ndarray:
    """压缩到 input_entropy − eve_info_bits − margin 位，长度非正时中止"""
    raw = np.asarray(bits, dtype=np.uint8)
    entropy = raw.shape[0] if input_entropy is None else input_entropy
    target = min(int(math.floor(entropy - eve_info_bits - security_margin_bits)), raw.shape[0])
    if target <= 0:
        raise SecurityAbort('no_key', f"隐私放大后密钥长度非正 (输入熵 {entropy:.0f}, "
                                      f"Eve 信息 {eve_info_bits:.0f}, 余量 {security_margin_bits})")
    return toeplitz_hash(raw, target, seed)


def export_key(bits, filepath: Union[str, Path], fmt: str = 'raw') -> Path:
    """导出密钥：raw 为 0/1 文本，hex 为按字节打包（末尾补零）的十六进制"""
    if fmt not in KEY_FORMATS:
        raise DomainError(f"未知的密钥格式: {fmt}")
    raw = np.asarray(bits, dtype=np.uint8)
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == 'raw':
        text = ''.join('1' if b else '0' for b in raw)
    else:
        text = np.packbits(raw).tobytes().hex()
    path.write_text(text + '\n', encoding='utf-8')
    return path


# ---------------------------------------------------------------- 完整流程

def dr_eve_information(chi: float, v: float, s: float) -> float:
    """正向协调下 Eve 关于 Alice 数据的信息 ½·log2((V+1/χ)/(s+1/χ))

    克隆机另一输出口的等效附加噪声为 1/χ，χ < 1 时小于 I_AB。
    """
    if chi <= 0:
        return 0.0
    chi_eve = 1.0 / chi
    return 0.5 * math.log2((v + chi_eve) / (s + chi_eve))


@dataclass
class KeySession:
    """一次密钥蒸馏会话

    Attributes:
        direction: 'RR' 或 'DR'
        alice_values / bob_values: 实数密钥元素（n0 单位）
        slices: 协调后的参考方码字（成功时双方相同）
        disclosed_bits: 公开的全部比特（奇偶位、验证哈希、整层公开）
        leaked_bits: 计入隐私放大的泄漏（不含整层公开的层，它们不进入密钥）
        level_error_rates / level_entropies: 公开子集上每层的硬判决误码率和平均后验熵（bit）
        final_key_a / final_key_b: 最终密钥
        beta_achieved: (保留层熵 − 泄漏) / (n·I_BA)
    """
    direction: str
    n: int
    slice_count: int
    alice_values: np.ndarray = field(repr=False)
    bob_values: np.ndarray = field(repr=False)
    seed: int = 0
    margin_bits: int = 64
    log: Optional[MessageLog] = field(default=None, repr=False)
    estimate: Optional[ChannelEstimate] = None
    slices: Optional[np.ndarray] = field(default=None, repr=False)
    n_key: int = 0
    level_error_rates: List[float] = field(default_factory=list)
    level_entropies: List[float] = field(default_factory=list)
    disclosed_levels: List[int] = field(default_factory=list)
    disclosed_bits: int = 0
    leaked_bits: int = 0
    i_ba: float = 0.0
    i_be: float = 0.0
    delta_i: float = 0.0
    eve_info_bits: float = 0.0
    input_entropy: float = 0.0
    beta_achieved: float = 0.0
    key_length: int = 0
    final_key_a: Optional[np.ndarray] = field(default=None, repr=False)
    final_key_b: Optional[np.ndarray] = field(default=None, repr=False)
    aborted: bool = False
    abort_reason: Optional[str] = None
    abort_message: str = ''

    @property
    def keys_match(self) -> bool:
        if self.final_key_a is None or self.final_key_b is None:
            return False
        return key_hash(self.final_key_a) == key_hash(self.final_key_b)

    def raise_if_aborted(self):
        if self.aborted:
            raise SecurityAbort(self.abort_reason, self.abort_message,
                                details=self.to_dict())

    def to_dict(self) -> Dict:
        """会话报告（不含原始数据与密钥，只给出密钥哈希）"""
        return {
            'direction': self.direction,
            'seed': self.seed,
            'n': self.n,
            'n_key': self.n_key,
            'slices': self.slice_count,
            'margin_bits': self.margin_bits,
            'estimate': None if self.estimate is None else self.estimate.to_dict(),
            'level_error_rates': list(self.level_error_rates),
            'level_entropies': list(self.level_entropies),
            'disclosed_levels': list(self.disclosed_levels),
            'disclosed_bits': self.disclosed_bits,
            'leaked_bits': self.leaked_bits,
            'i_ba': self.i_ba,
            'i_be': self.i_be,
            'delta_i': self.delta_i,
            'eve_info_bits': self.eve_info_bits,
            'input_entropy': self.input_entropy,
            'beta_achieved': self.beta_achieved,
            'key_length': self.key_length,
            'key_hash': None if self.final_key_a is None else key_hash(self.final_key_a),
            'keys_match': self.keys_match,
            'aborted': self.aborted,
            'abort_reason': self.abort_reason,
            'abort_message': self.abort_message,
        }


def _protocol_squeezing(result: RunResult) -> float:
    prep = result.config.prep
    return prep.squeezing if prep.mode == JOINT else 1.0 / prep.v


def _prep_noise(result: RunResult) -> np.ndarray:
    """每个密钥元素对应的 Alice 条件方差（无量纲）"""
    prep = result.config.prep
    if prep.mode != JOINT:
        return np.full(result.key_alice.shape[0], 1.0 / prep.v)
    s = prep.squeezing
    basis = result.key_basis if result.key_basis is not None else np.zeros(result.key_alice.shape[0])
    return np.where(basis == 0, s, 1.0 / s)


def distill(result: RunResult, direction: str = 'RR', slices: int = 4, rounds: int = 4,
            margin_bits: int = 64, sacrificed_fraction: float = 0.1,
            seed: Optional[int] = None) -> KeySession:
    """估计 → 切片 → 纠错 → 隐私放大

    协议中止不抛异常，而是记录在 KeySession.aborted / abort_reason 中；
    需要异常时调用 raise_if_aborted()。
    """
    _check_direction(direction)
    _check_slices(slices)
    if result.key_alice is None or result.key_bob is None:
        raise DomainError("仿真结果中没有密钥元素")
    seed = result.config.seed if seed is None else seed
    session = KeySession(direction=direction, n=int(result.key_alice.shape[0]),
                         slice_count=slices, alice_values=result.key_alice,
                         bob_values=result.key_bob, seed=seed, margin_bits=margin_bits,
                         log=MessageLog(direction, seed))
    logger.info(f"开始密钥蒸馏: {direction}, n={session.n}, m={slices}, seed={seed}")
    try:
        _distill_session(session, result, rounds, sacrificed_fraction)
    except SecurityAbort as e:
        session.aborted = True
        session.abort_reason = e.reason
        session.abort_message = str(e)
        logger.warning(f"协议中止 ({e.reason}): {e}")
    return session


def _distill_session(session: KeySession, result: RunResult, rounds: int,
                     sacrificed_fraction: float):
    v = result.config.prep.v
    s = _protocol_squeezing(result)
    m = session.slice_count
    log = session.log

    estimate = estimate_channel(session.alice_values, session.bob_values, sacrificed_fraction,
                                session.seed, _prep_noise(result), result.config.n0)
    session.estimate = estimate
    g, chi = estimate.g_hat, max(estimate.chi_hat, 0.0)
    session.i_ba = mutual_info_ba(g, chi, v, s)
    if session.direction == 'RR':
        session.delta_i = delta_i_rr(g, chi, v, s)
        if session.delta_i <= 0:
            raise SecurityAbort('insecure_channel',
                                f"估计的反向协调密钥率非正: ΔI={session.delta_i:.4g}")
        session.i_be = max(mutual_info_be_rr(g, chi, v), 0.0)
    else:
        if not dr_secure(g, estimate.eps_hat):
            raise SecurityAbort('insecure_channel',
                                f"正向协调超出 3 dB 界限: G={g:.4g}, ε={estimate.eps_hat:.4g}")
        session.i_be = dr_eve_information(chi, v, s)
        session.delta_i = session.i_ba - session.i_be

    if session.direction == 'RR':
        ref_all, fix_all = session.bob_values, session.alice_values
    else:
        ref_all, fix_all = session.alice_values, session.bob_values
    ref_key, fix_key = ref_all[estimate.key_indices], fix_all[estimate.key_indices]
    ref_pub, fix_pub = ref_all[estimate.sacrificed_indices], fix_all[estimate.sacrificed_indices]
    session.n_key = int(ref_key.shape[0])

    boundaries = quantile_boundaries(ref_key, m)
    ref_codes = slice_values(ref_key, m, boundaries)
    ref_bins = gray_decode(ref_codes)
    ref_pub_bins = gray_decode(slice_values(ref_pub, m, boundaries))
    # 参考方取值在非参考方取值条件下的线性高斯模型，由公开子集拟合
    slope = float(fix_pub @ ref_pub) / max(float(fix_pub @ fix_pub), 1e-300)
    sigma = math.sqrt(float(np.mean((ref_pub - slope * fix_pub) ** 2)))

    corrected = np.zeros(session.n_key, dtype=np.int64)
    for level in range(m):
        llr_pub = level_llr(slope * fix_pub, sigma, boundaries, ref_pub_bins, level, m)
        rate = float(np.mean((llr_pub < 0) != level_bits(ref_pub_bins, level)))
        entropy = soft_entropy(llr_pub)
        session.level_error_rates.append(rate)
        session.level_entropies.append(entropy)
        ref_bits = level_bits(ref_bins, level)
        if entropy > DISCLOSE_ENTROPY:
            log.add_disclosure(level, ref_bits)
            session.disclosed_levels.append(level)
            bits = ref_bits.copy()
        else:
            llr = level_llr(slope * fix_key, sigma, boundaries, corrected, level, m)
            bits = reconcile_level(ref_bits, llr < 0, rounds, session.seed, level, log=log,
                                   llr=llr).bits
        corrected = set_level(corrected, level, bits)
        logger.debug(f"第 {level} 层: 估计误码率 {rate:.4f}, 后验熵 {entropy:.4f}"
                     f"{'，整层公开' if level in session.disclosed_levels else ''}")

    session.slices = ref_codes
    session.disclosed_bits = log.disclosed_bits()
    kept = [level for level in range(m) if level not in session.disclosed_levels]
    if not kept:
        raise SecurityAbort('no_key', "所有切片层都已整层公开")
    session.leaked_bits = log.disclosed_bits(levels=kept)
    session.input_entropy = float(session.n_key * len(kept))
    session.eve_info_bits = session.n_key * session.i_be
    if session.i_ba > 0:
        session.beta_achieved = ((session.input_entropy - session.leaked_bits)
                                 / (session.n_key * session.i_ba))

    ref_bits_all = np.concatenate([level_bits(ref_bins, level) for level in kept])
    fix_bits_all = np.concatenate([level_bits(corrected, level) for level in kept])
    eve_total = session.eve_info_bits + session.leaked_bits
    key_ref = privacy_amplify(ref_bits_all, eve_total, session.margin_bits, session.seed,
                              session.input_entropy)
    key_fix = privacy_amplify(fix_bits_all, eve_total, session.margin_bits, session.seed,
                              session.input_entropy)
    if key_hash(key_ref) != key_hash(key_fix):
        raise SecurityAbort('reconciliation_failed', "最终密钥哈希不一致")

    if session.direction == 'RR':
        session.final_key_a, session.final_key_b = key_fix, key_ref
    else:
        session.final_key_a, session.final_key_b = key_ref, key_fix
    session.key_length = int(key_ref.shape[0])
    logger.info(f"密钥蒸馏完成: 密钥 {session.key_length} bit, β={session.beta_achieved:.3f}, "
                f"公开 {session.disclosed_bits} bit")
