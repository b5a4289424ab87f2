"""
信道与攻击模块

Alice→Bob 的高斯信道 (G, χ)，Eve 的最优个体高斯攻击：
- 条件方差的海森堡界（Alice 与 Eve 不能同时对 Bob 的两个正交分量知道太多）
- 显式的分束器纠缠克隆机，它恰好达到这个界
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError, UnphysicalStateError
from gaussian_core import (EmpiricalConditional, GaussianEnsemble, N0Like, SampleBatch,
                           apply_linear, beamsplitter, diagonal_ensemble,
                           empirical_conditional_variance, epr_ensemble, n0_value, sample,
                           vacuum_ensemble)
from preparation import PreparationConfig, check_squeezing, ensemble_for_squeezing, prepare_direct

logger = logging.getLogger(__name__)

BOB_LABELS = ("Q_B", "P_B")
EVE_LABELS = ("Q_E2", "P_E2", "Q_known", "P_known")
EVE_SOURCE_LABELS = ("E0_Q", "E0_P", "E1_Q", "E1_P")

# 子流编号（与 preparation 的编号错开）
STREAM_CHANNEL = 11
STREAM_CLONER = 12

# 过量噪声允许的数值误差
EPS_TOLERANCE = 1e-12


def vacuum_noise(g: float) -> float:
    """损耗引入的真空噪声 χ0 = (1−G)/G"""
    if not g > 0:
        raise DomainError(f"信道增益必须为正数: {g}")
    return (1.0 - g) / g


@dataclass(frozen=True)
class ChannelModel:
    """逐分量的信道增益和输入端等效附加噪声

    Q_B = √g_q·(Q + δQ)，⟨δQ²⟩ = chi_q·n0；P 分量同理。
    g_p / chi_p 省略时与 Q 分量相同（对称信道）。
    """
    g_q: float
    chi_q: float
    g_p: Optional[float] = None
    chi_p: Optional[float] = None

    def __post_init__(self):
        if self.g_p is None:
            object.__setattr__(self, 'g_p', self.g_q)
        if self.chi_p is None:
            object.__setattr__(self, 'chi_p', self.chi_q)
        for name, g, chi in (('Q', self.g_q, self.chi_q), ('P', self.g_p, self.chi_p)):
            if not (g > 0 and math.isfinite(g)):
                raise DomainError(f"{name} 分量信道增益必须为有限正数: {g}")
            if not (chi >= 0 and math.isfinite(chi)):
                raise UnphysicalStateError(f"{name} 分量附加噪声不能为负: {chi}")
            if g <= 1 and chi - vacuum_noise(g) < -EPS_TOLERANCE:
                raise UnphysicalStateError(
                    f"{name} 分量过量噪声为负 (χ={chi} < χ0={vacuum_noise(g)})")

    @classmethod
    def symmetric(cls, g: float, chi: float) -> 'ChannelModel':
        return cls(g_q=g, chi_q=chi)

    @classmethod
    def from_excess_noise(cls, g: float, eps: float) -> 'ChannelModel':
        """由增益和过量噪声 ε 构造对称信道，χ = χ0 + ε"""
        return cls.symmetric(g, vacuum_noise(g) + eps)

    @classmethod
    def from_loss_db(cls, loss_db: float, eps: float) -> 'ChannelModel':
        """由损耗 dB 数构造，dB = −10·log10(G)"""
        return cls.from_excess_noise(10.0 ** (-loss_db / 10.0), eps)

    @property
    def eps_q(self) -> float:
        return self.chi_q - vacuum_noise(self.g_q)

    @property
    def eps_p(self) -> float:
        return self.chi_p - vacuum_noise(self.g_p)

    @property
    def is_symmetric(self) -> bool:
        return self.g_q == self.g_p and self.chi_q == self.chi_p

    def then(self, following: 'ChannelModel') -> 'ChannelModel':
        """先经过本信道再经过 following：(g1·g2, χ1 + χ2/g1)"""
        return ChannelModel(
            g_q=self.g_q * following.g_q,
            chi_q=self.chi_q + following.chi_q / self.g_q,
            g_p=self.g_p * following.g_p,
            chi_p=self.chi_p + following.chi_p / self.g_p,
        )

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'g_q': self.g_q,
            'chi_q': self.chi_q,
            'g_p': self.g_p,
            'chi_p': self.chi_p,
            'eps_q': self.eps_q,
            'eps_p': self.eps_p,
        }

    @staticmethod
    def from_dict(data: Dict) -> 'ChannelModel':
        """从字典创建（忽略派生字段）"""
        return ChannelModel(g_q=data['g_q'], chi_q=data['chi_q'],
                            g_p=data.get('g_p'), chi_p=data.get('chi_p'))


def compose(outer: ChannelModel, inner: ChannelModel) -> ChannelModel:
    """outer ∘ inner：先 inner 后 outer，(g1·g2, χ2 + χ1/g2)"""
    return inner.then(outer)


@dataclass
class AttackBound:
    """Alice 的条件方差与 Eve 能达到的最小条件方差（单位 n0）"""
    v_b_given_a_q: float
    v_b_given_a_p: float
    v_b_given_e_q_min: float
    v_b_given_e_p_min: float

    def to_dict(self) -> Dict:
        return {
            'v_b_given_a_q': self.v_b_given_a_q,
            'v_b_given_a_p': self.v_b_given_a_p,
            'v_b_given_e_q_min': self.v_b_given_e_q_min,
            'v_b_given_e_p_min': self.v_b_given_e_p_min,
        }


def propagate(ch: ChannelModel, batch: SampleBatch, seed: int, n0: N0Like = None,
              workers: int = 1, stream: Sequence[int] = (),
              inputs: Tuple[str, str] = ("Q", "P")) -> SampleBatch:
    """样本经过信道：Q_B = √g_q·(Q + δ)，δ ~ N(0, chi_q·n0)，噪声与信号独立"""
    unit = n0_value(n0)
    noise = sample(diagonal_ensemble(("dQ", "dP"), (ch.chi_q, ch.chi_p), unit), batch.n, seed,
                   workers=workers, stream=tuple(stream) + (STREAM_CHANNEL,))
    q = math.sqrt(ch.g_q) * (batch.column(inputs[0]) + noise.column("dQ"))
    p = math.sqrt(ch.g_p) * (batch.column(inputs[1]) + noise.column("dP"))
    return SampleBatch(BOB_LABELS, np.column_stack([q, p]), seed)


def propagate_ensemble(ch: ChannelModel, e: GaussianEnsemble, n0: N0Like = None,
                       inputs: Tuple[str, str] = ("Q", "P"),
                       outputs: Tuple[str, str] = BOB_LABELS) -> GaussianEnsemble:
    """信道对协方差的解析作用"""
    noise_labels = ("_noise_Q", "_noise_P")
    e = e.direct_sum(diagonal_ensemble(noise_labels, (ch.chi_q, ch.chi_p), n0))
    for src, noise, out, g in ((inputs[0], noise_labels[0], outputs[0], ch.g_q),
                               (inputs[1], noise_labels[1], outputs[1], ch.g_p)):
        root = math.sqrt(g)
        e = apply_linear(e, (src, noise), np.array([[root, root], [0.0, 1.0]]),
                         outputs=(out, noise))
    kept = [label for label in e.labels if label not in noise_labels]
    return e.marginal(kept)


def alice_conditional_variance(ch: ChannelModel, v: float, s: float,
                               n0: N0Like = None) -> Tuple[float, float]:
    """(V_{Q_B|Q_A}, V_{P_B|P_A}) = (G_Q(χ_Q+s), G_P(χ_P+1/s))·n0"""
    check_squeezing(v, s)
    unit = n0_value(n0)
    return ch.g_q * (ch.chi_q + s) * unit, ch.g_p * (ch.chi_p + 1.0 / s) * unit


def eve_conditional_variance_bound(ch: ChannelModel, v: float,
                                   n0: N0Like = None) -> Tuple[float, float]:
    """Eve 的最小条件方差 (n0/(G_P(χ_P+1/V)), n0/(G_Q(χ_Q+1/V)))

    Q 分量的界由 P 信道参数决定，反之亦然；分母为 0 时返回 +inf（Eve 一无所知）。
    """
    if not v >= 1:
        raise DomainError(f"调制方差不能小于 1: V={v}")
    unit = n0_value(n0)
    denominators = (ch.g_p * (ch.chi_p + 1.0 / v), ch.g_q * (ch.chi_q + 1.0 / v))
    return tuple(unit / d if d > 0 else math.inf for d in denominators)


def attack_bound(ch: ChannelModel, v: float, s: float, n0: N0Like = None) -> AttackBound:
    ba_q, ba_p = alice_conditional_variance(ch, v, s, n0)
    be_q, be_p = eve_conditional_variance_bound(ch, v, n0)
    return AttackBound(ba_q, ba_p, be_q, be_p)


def _check_cloner_channel(ch: ChannelModel) -> float:
    if not ch.is_symmetric:
        raise DomainError("纠缠克隆机仅支持对称信道 (G_Q=G_P, χ_Q=χ_P)")
    if ch.g_q >= 1:
        raise DomainError(f"纠缠克隆机只对 G<1 构造: G={ch.g_q}")
    return ch.g_q


def cloner_epr_variance(ch: ChannelModel) -> float:
    """Eve 注入的 EPR 光束方差 W = Gχ/(1−G)；ε=0 时 W=1（真空）"""
    g = _check_cloner_channel(ch)
    return max(g * ch.chi_q / (1.0 - g), 1.0)


def cloner_known_coefficient(w: float) -> float:
    """E1 中 Eve 已知部分的系数 √(W²−1)/W；W ≤ 1 时已知部分为 0"""
    if w <= 1.0:
        return 0.0
    return math.sqrt(w * w - 1.0) / w


def cloner_ensemble(ch: ChannelModel, v: float, s: float = 1.0,
                    n0: N0Like = None) -> GaussianEnsemble:
    """纠缠克隆机的完整解析协方差

    Eve 把 EPR(W) 的一半 E1 与 Alice 的光在透过率 G 的分束器上混合，
    保留另一半 E0 并测量，得到 Q_known = α·E0_Q（P 分量取 −α，因为 P 反关联）。

    Returns:
        (Q_A, P_A, Q_B, P_B, Q_E2, P_E2, Q_known, P_known) 上的系综
    """
    g = _check_cloner_channel(ch)
    w = cloner_epr_variance(ch)
    alpha = cloner_known_coefficient(w)
    e = ensemble_for_squeezing(v, s, n0).direct_sum(epr_ensemble(w, n0, EVE_SOURCE_LABELS))
    e = beamsplitter(e, "Q", "E1_Q", g, out1="Q_B", out2="Q_E2")
    e = beamsplitter(e, "P", "E1_P", g, out1="P_B", out2="P_E2")
    e = apply_linear(e, ("E0_Q", "E0_P"), np.diag([alpha, -alpha]),
                     outputs=("Q_known", "P_known"))
    return e.marginal(("Q_A", "P_A") + BOB_LABELS + EVE_LABELS)


def beamsplitter_tap_ensemble(g: float, v: float, s: float = 1.0,
                              n0: N0Like = None) -> GaussianEnsemble:
    """纯损耗信道：Eve 只在分束器的另一输出口接收，入口为真空"""
    e = ensemble_for_squeezing(v, s, n0).direct_sum(vacuum_ensemble(("vac_Q", "vac_P"), n0))
    e = beamsplitter(e, "Q", "vac_Q", g, out1="Q_B", out2="Q_E2")
    e = beamsplitter(e, "P", "vac_P", g, out1="P_B", out2="P_E2")
    return e.marginal(("Q_A", "P_A") + BOB_LABELS + ("Q_E2", "P_E2"))


def eve_record_labels(ch: ChannelModel, quadrature: str = "Q") -> Tuple[str, ...]:
    """Eve 用于估计 Bob 某一分量的记录；已知部分恒为 0 时不参与回归"""
    labels = (f"{quadrature}_E2",)
    if cloner_known_coefficient(cloner_epr_variance(ch)) > 0:
        labels += (f"{quadrature}_known",)
    return labels


@dataclass
class ClonerResult:
    """纠缠克隆机模拟结果

    Attributes:
        bob: (Q_B, P_B) 样本
        eve: (Q_E2, P_E2, Q_known, P_known) 样本
        v_be_q_hat: Bob 的 Q_B 在 Eve 记录条件下的经验方差
        v_be_q_bound: 解析下界 n0/(G(χ+1/V))
    """
    bob: SampleBatch
    eve: SampleBatch
    v_be_q_hat: EmpiricalConditional
    v_be_q_bound: float

    @property
    def z_score(self) -> float:
        """经验值相对解析界的 z 分数（正值表示高于界）"""
        return (self.v_be_q_hat.value - self.v_be_q_bound) / self.v_be_q_hat.stderr


def entangling_cloner_attack(ch: ChannelModel, transmitted: SampleBatch, v: float, seed: int,
                             n0: N0Like = None, workers: int = 1,
                             stream: Sequence[int] = ()) -> ClonerResult:
    """对已发送的 (Q, P) 样本施加纠缠克隆机"""
    g = _check_cloner_channel(ch)
    unit = n0_value(n0)
    w = cloner_epr_variance(ch)
    alpha = cloner_known_coefficient(w)
    source = sample(epr_ensemble(w, unit, EVE_SOURCE_LABELS), transmitted.n, seed,
                    workers=workers, stream=tuple(stream) + (STREAM_CLONER,))
    mixed = transmitted.select(("Q", "P")).joined(source)
    mixed = mixed.mix("Q", "E1_Q", g, out1="Q_B", out2="Q_E2")
    mixed = mixed.mix("P", "E1_P", g, out1="P_B", out2="P_E2")
    mixed = mixed.with_columns(("Q_known", "P_known"),
                               (alpha * mixed.column("E0_Q"), -alpha * mixed.column("E0_P")))
    bob = mixed.select(BOB_LABELS)
    eve = mixed.select(EVE_LABELS)
    record = eve_record_labels(ch, "Q")
    v_be_hat = empirical_conditional_variance(mixed, "Q_B", record)
    bound = eve_conditional_variance_bound(ch, v, unit)[0]
    logger.debug(f"克隆机: G={g}, W={w:.6g}, V_B|E 经验={v_be_hat.value:.6g}, 界={bound:.6g}")
    return ClonerResult(bob, eve, v_be_hat, bound)


def entangling_cloner_simulate(ch: ChannelModel, v: float, n: int, seed: int,
                               n0: N0Like = None, prep: Optional[PreparationConfig] = None,
                               workers: int = 1, stream: Sequence[int] = ()) -> ClonerResult:
    """制备（默认相干态）后施加纠缠克隆机"""
    prep = prep or PreparationConfig.coherent(v)
    if prep.v != v:
        raise DomainError(f"制备参数的 V={prep.v} 与 v={v} 不一致")
    prepared = prepare_direct(prep, n, seed, n0=n0, workers=workers, stream=stream)
    return entangling_cloner_attack(ch, prepared.transmitted, v, seed, n0=n0,
                                    workers=workers, stream=stream)
