"""
安全性分析模块

闭式安全量：互信息、正向/反向协调密钥率、过量噪声阈值 ε_max、
强损耗近似、与 BB84 的比较、实际协调效率下的密钥率以及 Duan–Simon 可分性判据。
所有对数以 2 为底（bit），所有输入都是无量纲比值。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from channel_attacks import ChannelModel, attack_bound, vacuum_noise
from errors import DomainError
from gaussian_core import N0Like, n0_value
from preparation import check_squeezing, squeezing_of

logger = logging.getLogger(__name__)

# V→∞ 曲线的截断值；ε_max 的截断误差约 1/V，小于 1e-5
V_INFINITY = 1e6

PROTOCOL_MODES = ('coherent', 'squeezed', 'epr')
CURVE_PROTOCOLS = ('rr_coh', 'rr_epr', 'dr', 'entanglement')
ENTANGLEMENT_LIMIT = 2.0
STRONG_LOSS_LIMIT = 0.05

SECURITY_CURVE_COLUMNS = ('loss_db', 'g', 'eps_max_dr', 'eps_max_rr_coh', 'eps_max_rr_epr',
                          'eps_entanglement', 'dr_clipped')


def _check_channel(g: float, chi: float, v: float) -> None:
    if not (g > 0 and math.isfinite(g)):
        raise DomainError(f"信道增益必须为有限正数: {g}")
    if not chi >= 0:
        raise DomainError(f"附加噪声不能为负: {chi}")
    if not v >= 1:
        raise DomainError(f"调制方差不能小于 1: V={v}")


# ---------------------------------------------------------------- 单位换算

def loss_db_to_gain(loss_db: float) -> float:
    """dB = −10·log10(G)"""
    return 10.0 ** (-loss_db / 10.0)


def gain_to_loss_db(g: float) -> float:
    if not g > 0:
        raise DomainError(f"信道增益必须为正数: {g}")
    return -10.0 * math.log10(g)


def chi_from_eps(g: float, eps: float) -> float:
    return vacuum_noise(g) + eps


def eps_from_chi(g: float, chi: float) -> float:
    return chi - vacuum_noise(g)


# ---------------------------------------------------------------- 互信息与密钥率

def mutual_info_ba(g: float, chi: float, v: float, s: float) -> float:
    """I_BA = ½·log2((V+χ)/(s+χ))，增益在比值中约去"""
    _check_channel(g, chi, v)
    check_squeezing(v, s)
    return 0.5 * math.log2((v + chi) / (s + chi))


def mutual_info_be_rr(g: float, chi: float, v: float) -> float:
    """I_BE = ½·log2[(GV+Gχ)(Gχ+G/V)]，Eve 达到条件方差下界时的信息量"""
    _check_channel(g, chi, v)
    return 0.5 * math.log2((g * v + g * chi) * (g * chi + g / v))


def delta_i_rr(g: float, chi: float, v: float, s: float) -> float:
    """反向协调密钥率 ΔI = ½·log2[1/((Gχ+G/V)(Gχ+Gs))]"""
    _check_channel(g, chi, v)
    check_squeezing(v, s)
    return 0.5 * math.log2(1.0 / ((g * chi + g / v) * (g * chi + g * s)))


def delta_i_epr(g: float, chi: float, v: float) -> float:
    """EPR（压缩态）协议：ΔI = ½·log2[1/(Gχ+G/V)]，已计入只有一半符号可用的筛选"""
    _check_channel(g, chi, v)
    return 0.5 * math.log2(1.0 / (g * chi + g / v))


def delta_i_coh(g: float, chi: float, v: float) -> float:
    """相干态协议（s=1）的反向协调密钥率"""
    return delta_i_rr(g, chi, v, 1.0)


def delta_i_coh_from_excess(g: float, chi: float, v: float) -> float:
    """同一密钥率的另一种写法：ΔI_EPR − ½·log2(1+Gε)"""
    eps = eps_from_chi(g, chi)
    return delta_i_epr(g, chi, v) - 0.5 * math.log2(1.0 + g * eps)


def mutual_info_ba_quadratures(ch: ChannelModel, v: float, s: float) -> Tuple[float, float]:
    """非对称信道下两个分量各自的 I_BA：(½log2((V+χQ)/(s+χQ)), ½log2((V+χP)/(1/s+χP)))"""
    check_squeezing(v, s)
    return (0.5 * math.log2((v + ch.chi_q) / (s + ch.chi_q)),
            0.5 * math.log2((v + ch.chi_p) / (1.0 / s + ch.chi_p)))


def delta_i_rr_quadratures(ch: ChannelModel, v: float, s: float) -> Tuple[float, float]:
    """非对称信道下两个分量各自的反向协调密钥率

    Q 分量：Alice 的条件方差 G_Q(χ_Q+s) 对 Eve 的界 1/(G_P(χ_P+1/V))；P 分量对调。
    """
    check_squeezing(v, s)
    product_q = (ch.g_q * ch.chi_q + ch.g_q * s) * (ch.g_p * ch.chi_p + ch.g_p / v)
    product_p = (ch.g_p * ch.chi_p + ch.g_p / s) * (ch.g_q * ch.chi_q + ch.g_q / v)
    return 0.5 * math.log2(1.0 / product_q), 0.5 * math.log2(1.0 / product_p)


def rr_secure_asymmetric(ch: ChannelModel, v: float, s: float) -> bool:
    """任一分量顺序满足安全条件即可"""
    dq, dp = delta_i_rr_quadratures(ch, v, s)
    return dq > 0 or dp > 0


# ---------------------------------------------------------------- 噪声阈值

def epsilon_max_rr(g: float, v: float, s: float) -> float:
    """ΔI_RR = 0 时的过量噪声

    ε_max = 1 − 1/V − 1/G − ½(s−1/V) + √(1/G² + ¼(s−1/V)²)，
    √(a²+b²) − a 写成 b²/(√(a²+b²)+a) 以避免小 G 时的抵消误差。
    """
    _check_channel(g, 0.0, v)
    check_squeezing(v, s)
    a = 1.0 / g
    b = 0.5 * (s - 1.0 / v)
    return 1.0 - 1.0 / v - 0.5 * (s - 1.0 / v) + b * b / (math.hypot(a, b) + a)


def epsilon_max_coh(g: float, v: float) -> float:
    """相干态阈值 ½ − 1/(2V) − 1/G + √(1/G² + ¼(1−1/V)²)"""
    _check_channel(g, 0.0, v)
    a = 1.0 / g
    b = 0.5 * (1.0 - 1.0 / v)
    return 0.5 - 0.5 / v + b * b / (math.hypot(a, b) + a)


def epsilon_max_high_loss(v: float, s: float) -> float:
    """G→0 时 ε_max 的极限 1 − ½(s+1/V)"""
    check_squeezing(v, s)
    return 1.0 - 0.5 * (s + 1.0 / v)


def dr_threshold(g: float) -> float:
    """正向协调的过量噪声上限 2 − 1/G（等价于 χ < 1）"""
    if not g > 0:
        raise DomainError(f"信道增益必须为正数: {g}")
    return 2.0 - 1.0 / g


def dr_secure(g: float, eps: float) -> bool:
    return eps < dr_threshold(g)


@dataclass
class SeparabilityVerdict:
    """Duan–Simon 判据结果，margin = C² − (V−1)(V_B−1)，margin > 0 即纠缠"""
    separable: bool
    margin: float

    @property
    def entangled(self) -> bool:
        return not self.separable


def duan_simon_separable(g: float, chi: float, v: float) -> SeparabilityVerdict:
    """Alice–Bob 等效 EPR 态的可分性：纠缠 ⟺ (V−1)(V_B−1) < C²，V_B = G(V+χ)，C² = G(V²−1)"""
    _check_channel(g, chi, v)
    v_b = g * (v + chi)
    c_squared = g * (v * v - 1.0)
    margin = c_squared - (v - 1.0) * (v_b - 1.0)
    return SeparabilityVerdict(separable=not margin > 0, margin=margin)


# ---------------------------------------------------------------- 近似与比较

def strong_loss_rates(g: float, v: float, eps: float) -> Tuple[float, float]:
    """强损耗近似 ((G/2ln2)(1−1/V−ε), (G/2ln2)(1−1/V−2ε))，分别对应 EPR 与相干态"""
    if g > STRONG_LOSS_LIMIT:
        logger.warning(f"G={g} 超出强损耗近似的适用范围 (G ≤ {STRONG_LOSS_LIMIT})")
    prefactor = g / (2.0 * math.log(2.0))
    return prefactor * (1.0 - 1.0 / v - eps), prefactor * (1.0 - 1.0 / v - 2.0 * eps)


@dataclass
class BB84Comparison:
    """理想 BB84 在有损无误码信道上的净密钥率 ½·G·n̄（bit/时隙）"""
    nbar: float
    g: float
    rate: float

    def to_dict(self) -> Dict:
        return {'nbar': self.nbar, 'g': self.g, 'rate': self.rate}


def bb84_compare(g: float, nbar: float) -> BB84Comparison:
    if not (nbar > 0 and math.isfinite(nbar)):
        raise DomainError(f"平均光子数必须为有限正数: {nbar}")
    if nbar > 1:
        logger.warning(f"n̄={nbar} > 1：多光子脉冲在实际 BB84 中不安全，这里只作理想化比较")
    if not 0 <= g <= 1:
        raise DomainError(f"线路透过率必须在 [0, 1] 内: {g}")
    return BB84Comparison(nbar=nbar, g=g, rate=0.5 * g * nbar)


def direct_bb84_rate(g: float) -> float:
    """“正向”BB84：I_AB = G，I_AE = 1−G，只在 G > ½ 时为正"""
    if not 0 <= g <= 1:
        raise DomainError(f"线路透过率必须在 [0, 1] 内: {g}")
    return g - (1.0 - g)


def practical_rate(g: float, chi: float, v: float, s: float, beta: float) -> float:
    """协调效率为 β 时的密钥率 β·I_BA − I_BE"""
    if not 0 <= beta <= 1:
        raise DomainError(f"协调效率必须在 [0, 1] 内: {beta}")
    return beta * mutual_info_ba(g, chi, v, s) - mutual_info_be_rr(g, chi, v)


def required_efficiency(g: float, chi: float, v: float, s: float) -> float:
    """使实际密钥率为 0 的效率 β* = I_BE/I_BA"""
    i_ba = mutual_info_ba(g, chi, v, s)
    if i_ba <= 0:
        return math.inf
    return mutual_info_be_rr(g, chi, v) / i_ba


def signal_to_noise_db(g: float, chi: float, v: float, s: float) -> float:
    """Bob 端信噪比 (V−s)/(s+χ)，单位 dB"""
    check_squeezing(v, s)
    ratio = (v - s) / (s + chi)
    if ratio <= 0:
        return -math.inf
    return 10.0 * math.log10(ratio)


def secret_key_rate_bps(bits_per_symbol: float, symbol_rate_hz: float) -> float:
    """每秒密钥比特数"""
    if symbol_rate_hz < 0:
        raise DomainError(f"符号率不能为负: {symbol_rate_hz}")
    return max(bits_per_symbol, 0.0) * symbol_rate_hz


# ---------------------------------------------------------------- 协议预设与报告

def protocol_squeezing(mode: Optional[str], v: float, s: Optional[float] = None,
                       mu: Optional[float] = None) -> float:
    """协议对应的压缩因子：显式 s 优先，其次 μ，否则 coherent→1，squeezed/epr→1/V"""
    if s is not None:
        check_squeezing(v, s)
        return s
    if mu is not None:
        return squeezing_of(v, mu)
    if mode is None or mode == 'coherent':
        return 1.0
    if mode in ('squeezed', 'epr'):
        return 1.0 / v
    raise DomainError(f"未知的协议模式: {mode}")


def basis_sifting_factor(mode: Optional[str]) -> float:
    """单分量测量的协议只有一半符号的基对得上"""
    return 0.5 if mode in ('squeezed', 'epr') else 1.0


@dataclass
class SecurityReport:
    """一组参数下的全部安全量"""
    i_ba: float
    i_be: float
    delta_i_rr: float
    dr_secure: bool
    rr_secure: bool
    eps: float
    eps_max_rr: float
    entangled: bool
    basis_sifting_factor: float
    g: float = 1.0
    chi: float = 0.0
    v: float = 1.0
    s: float = 1.0
    mode: Optional[str] = None
    n0: float = 1.0
    delta_i_effective: float = 0.0
    eps_max_dr: float = 1.0
    separability_margin: float = 0.0
    snr_db: float = 0.0
    conditional_variances: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """转换为字典（JSON 友好，无穷大写成字符串）"""
        def clean(value):
            if isinstance(value, float) and math.isinf(value):
                return 'inf' if value > 0 else '-inf'
            if isinstance(value, dict):
                return {k: clean(v) for k, v in value.items()}
            return value

        return {
            'g': self.g,
            'loss_db': gain_to_loss_db(self.g),
            'chi': self.chi,
            'eps': self.eps,
            'v': self.v,
            's': self.s,
            'mode': self.mode,
            'n0': self.n0,
            'i_ba': self.i_ba,
            'i_be': self.i_be,
            'delta_i_rr': self.delta_i_rr,
            'delta_i_effective': self.delta_i_effective,
            'basis_sifting_factor': self.basis_sifting_factor,
            'rr_secure': self.rr_secure,
            'eps_max_rr': self.eps_max_rr,
            'dr_secure': self.dr_secure,
            'eps_max_dr': self.eps_max_dr,
            'entangled': self.entangled,
            'separability_margin': self.separability_margin,
            'snr_db': clean(self.snr_db),
            'conditional_variances': clean(self.conditional_variances),
        }


def security_report(ch: ChannelModel, v: float, s: float, mode: Optional[str] = None,
                    n0: N0Like = None) -> SecurityReport:
    """汇总安全量；非对称信道的互信息按 Q 分量给出，安全判定用两种顺序"""
    unit = n0_value(n0)
    g, chi = ch.g_q, ch.chi_q
    if ch.is_symmetric:
        i_ba = mutual_info_ba(g, chi, v, s)
        rate = delta_i_rr(g, chi, v, s)
        rr_ok = rate > 0
    else:
        i_ba = mutual_info_ba_quadratures(ch, v, s)[0]
        rate = delta_i_rr_quadratures(ch, v, s)[0]
        rr_ok = rr_secure_asymmetric(ch, v, s)
    i_be = i_ba - rate
    eps = ch.eps_q
    verdict = duan_simon_separable(g, chi, v)
    sifting = basis_sifting_factor(mode)
    report = SecurityReport(
        i_ba=i_ba,
        i_be=i_be,
        delta_i_rr=rate,
        dr_secure=dr_secure(g, eps),
        rr_secure=rr_ok,
        eps=eps,
        eps_max_rr=epsilon_max_rr(g, v, s),
        entangled=verdict.entangled,
        basis_sifting_factor=sifting,
        g=g,
        chi=chi,
        v=v,
        s=s,
        mode=mode,
        n0=unit,
        delta_i_effective=sifting * rate,
        eps_max_dr=dr_threshold(g),
        separability_margin=verdict.margin,
        snr_db=signal_to_noise_db(g, chi, v, s),
        conditional_variances=attack_bound(ch, v, s, unit).to_dict(),
    )
    logger.debug(f"安全报告: G={g:.6g}, ε={eps:.6g}, ΔI_RR={rate:.6g}")
    return report


def security_curve(loss_db_values: Sequence[float], v: float = V_INFINITY,
                   protocols: Sequence[str] = CURVE_PROTOCOLS) -> List[Dict]:
    """容许过量噪声随损耗变化的曲线，每个损耗点一行"""
    unknown = set(protocols) - set(CURVE_PROTOCOLS)
    if unknown:
        raise DomainError(f"未知的协议曲线: {', '.join(sorted(unknown))}")
    rows = []
    for loss_db in loss_db_values:
        if not 0 <= loss_db <= 40:
            raise DomainError(f"损耗必须在 [0, 40] dB 内: {loss_db}")
        g = loss_db_to_gain(loss_db)
        dr = dr_threshold(g) if 'dr' in protocols else None
        rows.append({
            'loss_db': float(loss_db),
            'g': g,
            'eps_max_dr': dr,
            'eps_max_rr_coh': epsilon_max_coh(g, v) if 'rr_coh' in protocols else None,
            'eps_max_rr_epr': epsilon_max_rr(g, v, 1.0 / v) if 'rr_epr' in protocols else None,
            'eps_entanglement': ENTANGLEMENT_LIMIT if 'entanglement' in protocols else None,
            'dr_clipped': dr is not None and dr < 0,
        })
    return rows
