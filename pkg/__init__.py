"""连续变量量子密钥分发工具集

高斯调制相干态/压缩态协议的解析安全分析与蒙特卡洛验证：
- 协方差记账、分束器与条件方差
- 纠缠克隆机攻击与 Eve 信息上界
- 正向/反向协调密钥率、3 dB 界限与 Duan–Simon 判据
- 可复现的仿真与网格扫描
- 切片、Cascade 纠错与隐私放大

各模块位于 src/，以顶层模块方式导入（见 tests/ 中的路径设置）。
"""

__version__ = "1.0.0"
