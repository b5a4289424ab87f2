"""
消息记录模块
协调过程中双方公开交换的全部消息（泄漏记录）以及会话报告的保存和加载
"""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MESSAGE_KINDS = ('parity', 'disclose', 'verify')


class MessageLog:
    """协调消息记录

    每条消息都视为 Eve 完全知道：
    - parity: 参考方一个块的奇偶校验位，计 1 bit
    - disclose: 整个切片层直接公开，计 len(bits) bit
    - verify: 验证哈希，计 bit_count bit
    """

    def __init__(self, direction: str, seed: Optional[int] = None):
        self.direction = direction
        self.messages: List[Dict] = []
        self.metadata = {
            'schema_version': SCHEMA_VERSION,
            'direction': direction,
            'seed': seed,
            'start_time': datetime.now().isoformat(),
        }

    def __len__(self) -> int:
        return len(self.messages)

    def add_parity(self, round_index: int, block_indices: Sequence[int], parity_bit: int,
                   level: int = 0):
        """记录一个块的奇偶校验位"""
        self.messages.append({
            'round': int(round_index),
            'direction': self.direction,
            'block_indices': [int(i) for i in block_indices],
            'parity_bit': int(parity_bit),
            'level': int(level),
            'kind': 'parity',
        })

    def add_disclosure(self, level: int, bits: Sequence[int]):
        """记录整层公开"""
        self.messages.append({
            'round': -1,
            'direction': self.direction,
            'block_indices': [],
            'parity_bit': None,
            'level': int(level),
            'kind': 'disclose',
            'bits': ''.join('1' if b else '0' for b in bits),
        })

    def add_verification(self, level: int, digest: str, bit_count: int, round_index: int = -1):
        """记录一次验证哈希比较"""
        self.messages.append({
            'round': int(round_index),
            'direction': self.direction,
            'block_indices': [],
            'parity_bit': None,
            'level': int(level),
            'kind': 'verify',
            'digest': digest,
            'bit_count': int(bit_count),
        })

    def disclosed_bits(self, levels: Optional[Sequence[int]] = None) -> int:
        """按记录重新计算泄漏比特数

        Args:
            levels: 只统计这些切片层，None 表示全部
        """
        total = 0
        for message in self.messages:
            if levels is not None and message['level'] not in levels:
                continue
            kind = message['kind']
            if kind == 'parity':
                total += 1
            elif kind == 'disclose':
                total += len(message['bits'])
            elif kind == 'verify':
                total += message['bit_count']
        return total

    def count(self, kind: str) -> int:
        return sum(1 for m in self.messages if m['kind'] == kind)

    def save_jsonl(self, filepath: Union[str, Path]) -> Path:
        """保存为逐行 JSON：第一行元数据，之后每行一条消息"""
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'metadata': self.metadata}, ensure_ascii=False) + '\n')
            for message in self.messages:
                f.write(json.dumps(message, ensure_ascii=False) + '\n')
        logger.debug(f"消息记录已保存: {path} ({len(self.messages)} 条)")
        return path

    @staticmethod
    def load_jsonl(filepath: Union[str, Path]) -> 'MessageLog':
        """从逐行 JSON 加载"""
        with open(filepath, 'r', encoding='utf-8') as f:
            lines = [line for line in f if line.strip()]
        if not lines:
            raise DomainError(f"消息记录为空: {filepath}")
        header = json.loads(lines[0])
        if 'metadata' not in header:
            raise DomainError(f"消息记录缺少元数据行: {filepath}")
        metadata = header['metadata']
        log = MessageLog(metadata.get('direction', 'RR'), metadata.get('seed'))
        log.metadata = metadata
        for line in lines[1:]:
            message = json.loads(line)
            if message.get('kind') not in MESSAGE_KINDS:
                raise DomainError(f"未知的消息类型: {message.get('kind')}")
            log.messages.append(message)
        return log


def save_session_report(report: Dict, filepath: Union[str, Path]) -> Path:
    """保存会话报告（自动补上 schema_version）"""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {'schema_version': SCHEMA_VERSION}
    data.update(report)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    return path


def load_session_report(filepath: Union[str, Path]) -> Dict:
    """加载会话报告并检查版本"""
    with open(filepath, 'r', encoding='utf-8') as f:
        data = json.load(f)
    version = data.get('schema_version')
    if version != SCHEMA_VERSION:
        raise ConfigError(f"不支持的报告版本: {version}")
    return data
