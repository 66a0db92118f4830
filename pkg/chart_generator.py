#!/usr/bin/env python3
"""
图表生成器
训练曲线（每步训练/测试ELBO）与图像网格（样本、分解、类别平均）
"""

import logging
import os
from typing import Dict, Optional, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402
from PIL import Image  # noqa: E402

from errors import DimensionError  # noqa: E402

logger = logging.getLogger(__name__)

SEPARATOR_VALUE = 128


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[0, 1] -> 0..255, rounded"""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def tile_grid(images: np.ndarray) -> np.ndarray:
    """[rows, cols, h, w] -> one 8-bit canvas with 1-pixel separators"""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"grid needs [rows, cols, h, w], got {images.shape}")
    rows, cols, h, w = images.shape
    canvas = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), SEPARATOR_VALUE, dtype=np.uint8)
    pixels = to_uint8(images)
    for r in range(rows):
        for c in range(cols):
            canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = pixels[r, c]
    return canvas


def save_grid(images: np.ndarray, path_stem: str) -> Tuple[str, str]:
    """Write `<stem>.png` (Pillow, mode L) and `<stem>.pgm` (binary P5)"""
    canvas = tile_grid(images)
    directory = os.path.dirname(path_stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    png_path = f"{path_stem}.png"
    pgm_path = f"{path_stem}.pgm"
    try:
        Image.fromarray(canvas).save(png_path, format="PNG")
        with open(pgm_path, "wb") as f:
            f.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii"))
            f.write(canvas.tobytes())
    except OSError as e:
        raise OSError(f"cannot write image grid {path_stem}: {e}") from e
    logger.info(f"图像网格已保存: {png_path}")
    return png_path, pgm_path


class ChartGenerator:
    def __init__(self, output_dir: str = "charts"):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

        plt.rcParams['font.sans-serif'] = ['Arial Unicode MS', 'DejaVu Sans']
        plt.rcParams['axes.unicode_minus'] = False

    def generate_learning_curves(self, frames: Dict[str, pd.DataFrame],
                                 title: str = "ELBO learning curves",
                                 filename: str = "learning_curves.png") -> Optional[str]:
        """
        生成训练曲线

        Args:
            frames: 模型标签 -> metrics.csv 数据框
            title: 图表标题
            filename: 输出文件名

        Returns:
            str: 图表文件路径，如果生成失败返回None
        """
        frames = {label: df for label, df in frames.items() if len(df) > 0}
        if not frames:
            logger.warning("没有可用的指标数据，跳过训练曲线")
            return None

        try:
            fig, axes = plt.subplots(1, 2, figsize=(16, 6), sharey=True)
            fig.suptitle(title, fontsize=16, fontweight='bold')
            colors = sns.color_palette("husl", len(frames))

            for ax, split in zip(axes, ("train", "test")):
                for color, (label, df) in zip(colors, frames.items()):
                    part = df[df['split'] == split]
                    if part.empty:
                        continue
                    if split == "train" and len(part) > 200:
                        # 平滑训练曲线
                        window = max(len(part) // 100, 1)
                        values = part['elbo_per_example'].rolling(window, min_periods=1).mean()
                    else:
                        values = part['elbo_per_example']
                    ax.plot(part['step'], values, color=color, linewidth=2, label=label)
                ax.set_title(f'{split} ELBO / example', fontsize=14, fontweight='bold')
                ax.set_xlabel('gradient step')
                ax.legend()
                ax.grid(True, alpha=0.3)
            axes[0].set_ylabel('nats')

            plt.tight_layout()
            chart_path = os.path.join(self.output_dir, filename)
            plt.savefig(chart_path, dpi=150, bbox_inches='tight')
            plt.close(fig)

            logger.info(f"训练曲线已保存: {chart_path}")
            return chart_path

        except Exception as e:
            logger.error(f"生成训练曲线失败: {e}")
            plt.close('all')
            return None
