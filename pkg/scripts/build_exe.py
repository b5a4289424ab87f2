"""
打包脚本 - 将命令行工具集打包成单文件可执行程序
使用PyInstaller进行打包
"""
import os
import shutil
import subprocess
import sys
import time
from datetime import datetime

EXE_NAME = 'cvqkd'


def parse_version(version_str):
    """解析版本号字符串"""
    return [int(p) for p in version_str.split('.')]


def increment_version(version_str, bump_type='patch'):
    """
    自动递增版本号
    bump_type: 'major', 'minor', 'patch'
    """
    parts = parse_version(version_str)

    if bump_type == 'major':
        parts = [parts[0] + 1, 0, 0]
    elif bump_type == 'minor':
        parts = [parts[0], parts[1] + 1, 0]
    else:  # patch
        parts[2] += 1

    return '.'.join(map(str, parts))


def build_time_string():
    """带本地时区偏移的编译时间"""
    utc_offset = -time.timezone if not time.daylight else -time.altzone
    hours_offset = utc_offset // 3600
    minutes_offset = (abs(utc_offset) % 3600) // 60
    tz_str = f"UTC{hours_offset:+03d}:{minutes_offset:02d}"
    return datetime.now().strftime(f'%Y-%m-%d %H:%M:%S {tz_str}')


def build_exe(auto_version=None):
    """
    构建可执行文件
    auto_version: None (不更新), 'major', 'minor', 'patch' (自动递增版本号)
    """
    print("=" * 60)
    print("开始打包 CV-QKD 工具集...")
    print("=" * 60)

    try:
        with open('VERSION', 'r', encoding='utf-8') as f:
            original_version = f.read().strip().split('\n')[0]
    except OSError as e:
        print(f"\n⚠️  读取VERSION文件失败: {e}")
        return False

    current_version = original_version
    if auto_version in ['major', 'minor', 'patch']:
        try:
            current_version = increment_version(original_version, auto_version)
        except ValueError as e:
            print(f"\n⚠️  更新版本号失败: {e}")
            return False
        print(f"\n✅ 版本号已更新: {original_version} -> {current_version} ({auto_version})")

    # 编译期间 VERSION 第二行写入编译时间，get_version() 只读第一行
    build_time = build_time_string()
    with open('VERSION', 'w', encoding='utf-8') as f:
        f.write(f"{current_version}\n{build_time}")
    print(f"\n✅ 已添加编译时间: {current_version} (编译时间: {build_time})")

    separator = ';' if sys.platform == 'win32' else ':'
    cmd = [
        'pyinstaller',
        '--clean',
        '--onefile',
        '--name', EXE_NAME,
        '--paths', 'src',
        '--additional-hooks-dir', 'scripts',
        '--add-data', f"VERSION{separator}.",
        'src/cli_app.py',
    ]

    success = False
    try:
        print("\n执行打包命令...")
        subprocess.run(cmd, check=True)
        success = True

        exe = f"{EXE_NAME}.exe" if sys.platform == 'win32' else EXE_NAME
        print("\n" + "=" * 60)
        print("✅ 打包成功!")
        print("=" * 60)
        print("\n生成的文件位置:")
        print(f"  - 可执行文件: dist/{exe}")
        print(f"  - 配置文件: 可选，放在当前目录的 cvqkd_config.json")
        print("  - 日志目录: 运行时自动创建 logs/ 目录")
        print("\n使用说明:")
        print(f"  dist/{exe} keyrate --loss-db 20 --v 10 --eps 0")
        print(f"  dist/{exe} --help")
        print("=" * 60)
    except subprocess.CalledProcessError as e:
        print(f"\n❌ 打包失败: {e}")
        print("\n请确保已安装PyInstaller:")
        print("  pip install pyinstaller")
    except FileNotFoundError:
        print("\n❌ 未找到PyInstaller")
        print("\n请先安装PyInstaller:")
        print("  pip install pyinstaller")
    finally:
        # 保留新版本号，只移除编译时间
        with open('VERSION', 'w', encoding='utf-8') as f:
            f.write(current_version + '\n')
        print(f"\n✅ VERSION文件已恢复为: {current_version}")
        if os.path.isdir('build'):
            shutil.rmtree('build', ignore_errors=True)
    return success


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description='打包 CV-QKD 工具集')
    parser.add_argument('--version', choices=['major', 'minor', 'patch'],
                        help='自动递增版本号: major (主版本), minor (次版本), patch (补丁版本)')
    args = parser.parse_args()

    # 检查是否在正确的目录
    if not os.path.exists('src/cli_app.py'):
        print("❌ 错误: 请在项目根目录运行此脚本")
        sys.exit(1)

    sys.exit(0 if build_exe(auto_version=args.version) else 1)
