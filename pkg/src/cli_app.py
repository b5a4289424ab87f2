"""命令行版本的 CV-QKD 工具集

子命令：
    security-curve  容许过量噪声随损耗变化的曲线（CSV）
    keyrate         单组参数的安全报告（JSON）
    simulate        一次蒙特卡洛仿真
    verify          网格扫描，|z| 超过门限时退出码为 4
    distill         端到端密钥蒸馏，协议中止时退出码为 3
"""
import argparse
import json
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from channel_attacks import ChannelModel
from config_manager import ToolkitConfig, get_version, load_config
from errors import CvqkdError, DomainError, SecurityAbort, VerificationError
from log_utils import Colors, colorize, setup_logging
from message_log import SCHEMA_VERSION, save_session_report
from preparation import JOINT, PreparationConfig
from reconciliation import DIRECTIONS, KEY_FORMATS, distill, export_key
from security_analysis import (CURVE_PROTOCOLS, PROTOCOL_MODES, SECURITY_CURVE_COLUMNS,
                               practical_rate, protocol_squeezing, required_efficiency,
                               secret_key_rate_bps, security_curve, security_report)
from simulation_harness import (RunConfig, SweepTable, build_grid, GridPoint, run, sweep,
                                sweep_row, format_cell)

EXIT_OK = 0
EXIT_DOMAIN = 2
EXIT_ABORT = 3
EXIT_VERIFY = 4

ATTACK_NAMES = {'none': 'none', 'cloner': 'entangling_cloner'}
DEFAULT_FORMATS = {
    'security-curve': 'csv',
    'keyrate': 'json',
    'simulate': 'json',
    'verify': 'csv',
    'distill': 'json',
}


def print_header(stream=None, enable_color: bool = True):
    """打印程序头部信息"""
    stream = stream or sys.stdout
    print("=" * 60, file=stream)
    print(colorize(f"     连续变量量子密钥分发工具集 v{get_version()}", Colors.BOLD, enable_color),
          file=stream)
    print("=" * 60, file=stream)


def status(message: str, color: str, enable_color: bool = True):
    """状态行固定输出到 stderr，不干扰 stdout 上的结果数据"""
    print(colorize(message, color, enable_color), file=sys.stderr)


def float_list(text: str) -> List[float]:
    """解析逗号分隔的浮点数列表"""
    try:
        values = [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是逗号分隔的数字列表: {text}")
    if not values:
        raise argparse.ArgumentTypeError("列表不能为空")
    return values


def protocol_list(text: str) -> List[str]:
    names = [part.strip() for part in text.split(',') if part.strip()]
    unknown = [name for name in names if name not in CURVE_PROTOCOLS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"协议曲线只能取 {', '.join(CURVE_PROTOCOLS)}: {text}")
    return names


# ---------------------------------------------------------------- 参数定义

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group('通用参数')
    group.add_argument('--n0', type=float, default=None, help='散粒噪声单位 (默认: 1.0)')
    group.add_argument('--format', choices=['csv', 'json'], default=None,
                       help='输出格式 (默认随子命令而定)')
    group.add_argument('--out', '-o', default=None, help='输出文件 (默认: 标准输出)')
    group.add_argument('--config', '-c', default=None, help='JSON 配置文件')
    group.add_argument('--log-dir', '-l', default=None, help='日志目录 (默认: logs)')
    group.add_argument('--verbose', action='store_true', help='输出调试日志')
    group.add_argument('--no-color', action='store_true', help='关闭终端颜色')
    group.add_argument('--workers', '-w', type=int, default=None, help='并行线程数 (默认: 1)')
    return common


def _add_channel_arguments(parser: argparse.ArgumentParser):
    channel = parser.add_mutually_exclusive_group(required=True)
    channel.add_argument('--g', type=float, help='信道增益 G')
    channel.add_argument('--loss-db', type=float, help='信道损耗 (dB)')
    parser.add_argument('--v', type=float, required=True, help='调制方差 V (N0 单位)')
    parser.add_argument('--eps', type=float, required=True,
                        help='过量噪声 ε (N0 单位)')


def _add_protocol_arguments(parser: argparse.ArgumentParser):
    protocol = parser.add_mutually_exclusive_group()
    protocol.add_argument('--mode', choices=PROTOCOL_MODES, help='协议预设')
    protocol.add_argument('--s', type=float, help='压缩因子 s ∈ [1/V, V]')
    protocol.add_argument('--mu', type=float, help='联合测量噪声比 μ > 0')


def build_parser() -> argparse.ArgumentParser:
    """构造命令行解析器"""
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='cvqkd', description='连续变量量子密钥分发工具集')
    parser.add_argument('--version', action='version', version=f"%(prog)s {get_version()}")
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    curve = commands.add_parser('security-curve', parents=[common],
                                help='容许过量噪声随损耗变化的曲线')
    curve.add_argument('--loss-min', type=float, default=0.0, help='最小损耗 dB (默认: 0)')
    curve.add_argument('--loss-max', type=float, default=40.0, help='最大损耗 dB (默认: 40)')
    curve.add_argument('--points', type=int, default=41, help='损耗点数 (默认: 41)')
    curve.add_argument('--v', type=float, default=None, help='调制方差 (默认: 1e6)')
    curve.add_argument('--protocols', type=protocol_list, default=list(CURVE_PROTOCOLS),
                       help='逗号分隔: rr_coh,rr_epr,dr,entanglement')

    keyrate = commands.add_parser('keyrate', parents=[common], help='单组参数的安全报告')
    _add_channel_arguments(keyrate)
    _add_protocol_arguments(keyrate)
    keyrate.add_argument('--beta', type=float, default=None, help='协调效率 β')
    keyrate.add_argument('--symbol-rate', type=float, default=None, help='符号率 (Hz)')

    simulate = commands.add_parser('simulate', parents=[common], help='一次蒙特卡洛仿真')
    _add_channel_arguments(simulate)
    _add_protocol_arguments(simulate)
    simulate.add_argument('--attack', choices=sorted(ATTACK_NAMES), default='none',
                          help='攻击模型 (默认: none)')
    simulate.add_argument('--n', type=int, default=100000, help='符号数 (默认: 100000)')
    simulate.add_argument('--seed', type=int, default=0, help='随机种子 (默认: 0)')
    simulate.add_argument('--bob-basis', choices=['fixed_q', 'random'], default='fixed_q',
                          help='Bob 的测量基策略 (默认: fixed_q)')
    simulate.add_argument('--source', choices=['direct', 'epr'], default='direct',
                          help='制备方式 (默认: direct)')
    simulate.add_argument('--bootstrap', action='store_true', help='附加自助法标准误差')

    verify = commands.add_parser('verify', parents=[common], help='网格扫描验证解析公式')
    verify.add_argument('--g-list', type=float_list, default=[0.9, 0.5, 0.1])
    verify.add_argument('--eps-list', type=float_list, default=[0.0, 0.2])
    verify.add_argument('--v-list', type=float_list, default=[4.0, 10.0])
    verify.add_argument('--mu', type=float_list, default=[1.0], help='μ 列表 (默认: 1)')
    verify.add_argument('--n', type=int, default=1000000, help='每个网格点的符号数')
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--attack', choices=sorted(ATTACK_NAMES), default='cloner',
                        help='攻击模型 (默认: cloner，可同时检验 V_B|E 与 I_BE)')
    verify.add_argument('--z-gate', type=float, default=None, help='|z| 门限 (默认: 5)')
    verify.add_argument('--inject-bias', type=float, default=0.0,
                        help='对解析值施加的相对偏差（反向对照）')

    dist = commands.add_parser('distill', parents=[common], help='端到端密钥蒸馏')
    _add_channel_arguments(dist)
    _add_protocol_arguments(dist)
    dist.add_argument('--direction', choices=DIRECTIONS, default='RR', help='协调方向')
    dist.add_argument('--attack', choices=sorted(ATTACK_NAMES), default='none')
    dist.add_argument('--n', type=int, default=10000, help='符号数 (默认: 10000)')
    dist.add_argument('--seed', type=int, default=0)
    dist.add_argument('--slices', type=int, default=None, help='切片数 m (默认: 4)')
    dist.add_argument('--rounds', type=int, default=None, help='Cascade 轮数 (默认: 4)')
    dist.add_argument('--margin', type=int, default=None, help='安全余量比特 (默认: 64)')
    dist.add_argument('--sacrificed-fraction', type=float, default=None,
                      help='用于参数估计的公开比例 (默认: 0.1)')
    dist.add_argument('--key-dir', default=None, help='密钥、消息记录和会话报告的输出目录')
    dist.add_argument('--key-format', choices=KEY_FORMATS, default='raw')
    return parser


# ---------------------------------------------------------------- 参数换算

def channel_from_args(args) -> ChannelModel:
    if args.loss_db is not None:
        if args.loss_db < 0:
            raise DomainError(f"损耗不能为负: {args.loss_db}")
        return ChannelModel.from_loss_db(args.loss_db, args.eps)
    return ChannelModel.from_excess_noise(args.g, args.eps)


def squeezing_from_args(args) -> float:
    return protocol_squeezing(args.mode, args.v, getattr(args, 's', None), args.mu)


def prep_from_args(args) -> PreparationConfig:
    """把协议参数换成 Alice 的制备方式"""
    s = getattr(args, 's', None)
    if args.mu is not None:
        return PreparationConfig(args.v, JOINT, mu=args.mu)
    if s is not None:
        return GridPoint(g=1.0, eps=0.0, v=args.v, mu=None, s=s).prep_config()
    if args.mode in ('squeezed', 'epr'):
        return PreparationConfig.squeezed(args.v)
    return PreparationConfig.coherent(args.v)


def _loss_grid(loss_min: float, loss_max: float, points: int) -> List[float]:
    if points < 1:
        raise DomainError(f"损耗点数至少为 1: {points}")
    if not 0 <= loss_min <= loss_max <= 40:
        raise DomainError(f"损耗范围必须在 [0, 40] dB 内: [{loss_min}, {loss_max}]")
    if points == 1:
        return [float(loss_min)]
    return [float(x) for x in np.linspace(loss_min, loss_max, points)]


def jsonable(value):
    """转成 JSON 可表示的值：numpy 标量转 Python 标量，非有限浮点数转字符串"""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def json_document(command: str, config: Dict, seed: Optional[int], result) -> str:
    document = {
        'schema_version': SCHEMA_VERSION,
        'command': command,
        'config': config,
        'seed': seed,
        'result': result,
    }
    return json.dumps(jsonable(document), ensure_ascii=False, indent=2, allow_nan=False) + '\n'


def rows_to_csv(columns: Sequence[str], rows: Sequence[Dict]) -> str:
    table = [','.join(columns)]
    for row in rows:
        table.append(','.join(format_cell(row[column]) for column in columns))
    return '\n'.join(table) + '\n'


def write_output(text: str, out: Optional[str]):
    """写到 --out 指定的文件，否则写到标准输出"""
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- 子命令

def cmd_security_curve(args, config: ToolkitConfig) -> int:
    v = args.v if args.v is not None else config.v_infinity
    losses = _loss_grid(args.loss_min, args.loss_max, args.points)
    rows = security_curve(losses, v=v, protocols=args.protocols)
    if args.format == 'json':
        echo = {'loss_min': args.loss_min, 'loss_max': args.loss_max, 'points': args.points,
                'v': v, 'protocols': list(args.protocols), 'n0': config.n0}
        write_output(json_document(args.command, echo, None, rows), args.out)
    else:
        write_output(rows_to_csv(SECURITY_CURVE_COLUMNS, rows), args.out)
    return EXIT_OK


def cmd_keyrate(args, config: ToolkitConfig) -> int:
    channel = channel_from_args(args)
    s = squeezing_from_args(args)
    report = security_report(channel, args.v, s, args.mode, config.n0)
    result = report.to_dict()
    g, chi = channel.g_q, channel.chi_q
    if args.beta is not None:
        result['beta'] = args.beta
        result['practical_rate'] = practical_rate(g, chi, args.v, s, args.beta)
        result['beta_star'] = required_efficiency(g, chi, args.v, s)
    if args.symbol_rate is not None:
        per_symbol = result.get('practical_rate', report.delta_i_effective)
        result['symbol_rate_hz'] = args.symbol_rate
        result['key_rate_bps'] = secret_key_rate_bps(per_symbol, args.symbol_rate)

    if args.format == 'csv':
        columns = [key for key, value in result.items() if not isinstance(value, dict)]
        write_output(rows_to_csv(columns, [result]), args.out)
    else:
        echo = {'channel': channel.to_dict(), 'v': args.v, 's': s, 'mode': args.mode,
                'n0': config.n0, 'beta': args.beta, 'symbol_rate_hz': args.symbol_rate}
        write_output(json_document(args.command, echo, None, result), args.out)
    color = Colors.BRIGHT_GREEN if report.rr_secure else Colors.BRIGHT_YELLOW
    status(f"ΔI_RR = {report.delta_i_rr:.6g} bit/符号 "
           f"({'安全' if report.rr_secure else '不安全'})", color, config.enable_color)
    return EXIT_OK


def _run_config(args, config: ToolkitConfig, bob_basis: str) -> RunConfig:
    return RunConfig(
        prep=prep_from_args(args),
        channel=channel_from_args(args),
        attack=ATTACK_NAMES[args.attack],
        n=args.n,
        seed=args.seed,
        bob_basis_policy=bob_basis,
        n0=config.n0,
        workers=config.workers,
        source=getattr(args, 'source', 'direct'),
        bootstrap=getattr(args, 'bootstrap', False),
        bootstrap_resamples=config.bootstrap_resamples,
    )


def cmd_simulate(args, config: ToolkitConfig) -> int:
    cfg = _run_config(args, config, args.bob_basis)
    result = run(cfg)
    if args.format == 'csv':
        point = GridPoint(cfg.channel.g_q, cfg.channel.eps_q, cfg.prep.v, cfg.prep.mu)
        table = SweepTable([sweep_row(0, point, result, config.z_gate)], config.z_gate)
        write_output(table.to_csv(), args.out)
    else:
        write_output(json_document(args.command, cfg.to_dict(), cfg.seed, result.to_dict()),
                     args.out)
    status(f"仿真完成: max|z| = {result.max_abs_z():.3f}", Colors.BRIGHT_GREEN,
           config.enable_color)
    return EXIT_OK


def cmd_verify(args, config: ToolkitConfig) -> int:
    z_gate = args.z_gate if args.z_gate is not None else config.z_gate
    grid = build_grid(args.g_list, args.eps_list, args.v_list, args.mu)
    template = RunConfig(
        prep=grid[0].prep_config(),
        channel=ChannelModel.from_excess_noise(grid[0].g, grid[0].eps),
        attack=ATTACK_NAMES[args.attack],
        n=args.n,
        seed=args.seed,
        n0=config.n0,
    )
    table = sweep(grid, template, z_gate=z_gate, workers=config.workers,
                  analytic_bias=args.inject_bias)
    if args.format == 'json':
        echo = {'g_list': args.g_list, 'eps_list': args.eps_list, 'v_list': args.v_list,
                'mu': args.mu, 'n': args.n, 'attack': template.attack, 'n0': config.n0,
                'z_gate': z_gate, 'inject_bias': args.inject_bias}
        write_output(json_document(args.command, echo, args.seed, table.rows), args.out)
    else:
        write_output(table.to_csv(), args.out)
    if not table.all_passed:
        raise VerificationError(f"{table.flagged_rows}/{len(table.rows)} 个网格点 |z| > {z_gate}",
                                flagged_rows=table.flagged_rows)
    status(f"全部 {len(table.rows)} 个网格点通过 (|z| ≤ {z_gate})", Colors.BRIGHT_GREEN,
           config.enable_color)
    return EXIT_OK


def cmd_distill(args, config: ToolkitConfig) -> int:
    cfg = _run_config(args, config, 'random')
    result = run(cfg)
    session = distill(result, direction=args.direction, slices=config.slices,
                      rounds=config.rounds, margin_bits=config.margin_bits,
                      sacrificed_fraction=config.sacrificed_fraction, seed=cfg.seed)
    report = session.to_dict()

    if args.key_dir:
        key_dir = Path(args.key_dir)
        suffix = 'txt' if args.key_format == 'raw' else 'hex'
        if not session.aborted:
            export_key(session.final_key_a, key_dir / f"key_alice.{suffix}", args.key_format)
            export_key(session.final_key_b, key_dir / f"key_bob.{suffix}", args.key_format)
        session.log.save_jsonl(key_dir / "message_log.jsonl")
        save_session_report(jsonable({'command': args.command, 'config': cfg.to_dict(),
                                      'session': report}),
                            key_dir / "session_report.json")

    if args.format == 'csv':
        columns = [key for key, value in report.items() if not isinstance(value, (dict, list))]
        write_output(rows_to_csv(columns, [report]), args.out)
    else:
        write_output(json_document(args.command, cfg.to_dict(), cfg.seed, report), args.out)

    session.raise_if_aborted()
    status(f"密钥蒸馏成功: {session.key_length} bit, 双方一致: {session.keys_match}",
           Colors.BRIGHT_GREEN, config.enable_color)
    return EXIT_OK


COMMANDS = {
    'security-curve': cmd_security_curve,
    'keyrate': cmd_keyrate,
    'simulate': cmd_simulate,
    'verify': cmd_verify,
    'distill': cmd_distill,
}


def _merged_config(args) -> ToolkitConfig:
    """配置文件覆盖默认值，显式参数覆盖配置文件"""
    return load_config(args.config).merged(
        n0=args.n0,
        workers=args.workers,
        log_dir=args.log_dir,
        enable_color=False if args.no_color else None,
        slices=getattr(args, 'slices', None),
        rounds=getattr(args, 'rounds', None),
        margin_bits=getattr(args, 'margin', None),
        sacrificed_fraction=getattr(args, 'sacrificed_fraction', None),
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 的用法错误退出码为 2，--help / --version 为 0
        return e.code if isinstance(e.code, int) else EXIT_OK
    if args.format is None:
        args.format = DEFAULT_FORMATS[args.command]

    enable_color = not args.no_color
    try:
        config = _merged_config(args)
        enable_color = config.enable_color
        log_file = setup_logging(config.log_dir, verbose=args.verbose, enable_color=enable_color)
        if args.out:
            print_header(enable_color=enable_color)
        if log_file is not None:
            status(f"日志文件: {log_file}", Colors.BRIGHT_BLACK, enable_color)
        code = COMMANDS[args.command](args, config)
        if args.out:
            print(f"结果已保存到: {args.out}")
        return code
    except SecurityAbort as e:
        status(f"协议中止 ({e.reason}): {e}", Colors.BRIGHT_RED, enable_color)
        return EXIT_ABORT
    except VerificationError as e:
        status(f"验证失败: {e}", Colors.BRIGHT_RED, enable_color)
        return EXIT_VERIFY
    except DomainError as e:
        status(f"错误: {e}", Colors.BRIGHT_RED, enable_color)
        return EXIT_DOMAIN
    except CvqkdError as e:
        status(f"错误: {e}", Colors.BRIGHT_RED, enable_color)
        return 1


if __name__ == "__main__":
    sys.exit(main())
