"""
日志工具模块
提供终端颜色、带颜色的控制台日志格式以及按时间戳命名的日志文件
"""
import logging
from datetime import datetime
from pathlib import Path
from typing import List, Optional


# ANSI颜色代码
class Colors:
    """ANSI终端颜色代码"""
    RESET = '\033[0m'
    BOLD = '\033[1m'

    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    CYAN = '\033[36m'

    # 亮色
    BRIGHT_BLACK = '\033[90m'
    BRIGHT_RED = '\033[91m'
    BRIGHT_GREEN = '\033[92m'
    BRIGHT_YELLOW = '\033[93m'
    BRIGHT_BLUE = '\033[94m'
    BRIGHT_CYAN = '\033[96m'

    LEVEL_COLORS = {
        logging.DEBUG: BRIGHT_BLACK,
        logging.INFO: '',
        logging.WARNING: BRIGHT_YELLOW,
        logging.ERROR: BRIGHT_RED,
        logging.CRITICAL: BOLD + BRIGHT_RED,
    }

    @staticmethod
    def for_level(levelno: int) -> str:
        """根据日志级别返回对应的颜色代码"""
        if levelno >= logging.CRITICAL:
            return Colors.LEVEL_COLORS[logging.CRITICAL]
        if levelno >= logging.ERROR:
            return Colors.LEVEL_COLORS[logging.ERROR]
        if levelno >= logging.WARNING:
            return Colors.LEVEL_COLORS[logging.WARNING]
        if levelno >= logging.INFO:
            return Colors.LEVEL_COLORS[logging.INFO]
        return Colors.LEVEL_COLORS[logging.DEBUG]


def colorize(text: str, color: str, enable: bool = True) -> str:
    """给文本加上颜色（enable=False 时原样返回）"""
    if not enable or not color:
        return text
    return f"{color}{text}{Colors.RESET}"


class ColoredFormatter(logging.Formatter):
    """带颜色的控制台日志格式

    时间戳灰色显示，消息按级别着色，格式与串口监控输出一致：
    [时间] [模块] 消息
    """

    def __init__(self, enable_color: bool = True):
        super().__init__()
        self.enable_color = enable_color

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.fromtimestamp(record.created).strftime("%Y-%m-%d %H:%M:%S.%f")[:-3]
        message = record.getMessage()
        if record.exc_info:
            message = f"{message}\n{self.formatException(record.exc_info)}"
        if not self.enable_color:
            return f"[{timestamp}] [{record.name}] {message}"
        level_color = Colors.for_level(record.levelno)
        return (f"{Colors.BRIGHT_BLACK}[{timestamp}]{Colors.RESET} "
                f"{Colors.BRIGHT_CYAN}[{record.name}]{Colors.RESET} "
                f"{colorize(message, level_color)}")


# setup_logging 安装的处理器，重复调用时先移除
_installed_handlers: List[logging.Handler] = []


def setup_logging(log_dir: Optional[str] = "logs", verbose: bool = False,
                  enable_color: bool = True) -> Optional[Path]:
    """配置根日志器

    Args:
        log_dir: 日志目录，None 表示不写文件
        verbose: 控制台是否输出 DEBUG 级别
        enable_color: 控制台是否使用颜色

    Returns:
        本次创建的日志文件路径（未写文件时为 None）
    """
    root = logging.getLogger()
    for handler in _installed_handlers:
        root.removeHandler(handler)
        handler.close()
    _installed_handlers.clear()

    root.setLevel(logging.DEBUG)

    console = logging.StreamHandler()
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(ColoredFormatter(enable_color=enable_color))
    root.addHandler(console)
    _installed_handlers.append(console)

    log_file = None
    if log_dir:
        directory = Path(log_dir)
        directory.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = directory / f"cvqkd_{timestamp}.log"
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(ColoredFormatter(enable_color=False))
        root.addHandler(file_handler)
        _installed_handlers.append(file_handler)

    return log_file
