from typing import Dict, List, Optional
from pathlib import Path
from datetime import datetime
import io
import json
import zipfile
from config import DataConfig

class RunExporter:
    """运行结果导出器：所有文件只写在输出目录内"""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.encoding = DataConfig.FILE_ENCODING
        self.written: List[Path] = []

    def path(self, filename: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / filename

    def write_text(self, filename: str, content: str) -> Path:
        """写文本文件"""
        path = self.path(filename)
        with open(path, 'w', encoding=self.encoding, newline='\n') as f:
            f.write(content)
        self._remember(path)
        return path

    def write_bytes(self, filename: str, content: bytes) -> Path:
        """写二进制文件"""
        path = self.path(filename)
        path.write_bytes(content)
        self._remember(path)
        return path

    def write_json(self, filename: str, payload: Dict) -> Path:
        return self.write_text(filename, json.dumps(payload, indent=2, ensure_ascii=False) + '\n')

    def _remember(self, path: Path):
        if path not in self.written:
            self.written.append(path)

    def export_bundle(self, filename: str = 'run.zip', summary: Optional[Dict] = None) -> Path:
        """把已写出的文件连同说明打包为ZIP"""
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, 'w', zipfile.ZIP_DEFLATED) as zipf:
            for path in self.written:
                zipf.write(path, path.name)
            zipf.writestr('README.md', self._generate_readme(summary or {}))
        return self.write_bytes(filename, buffer.getvalue())

    def _generate_readme(self, summary: Dict) -> str:
        """生成README文件"""
        now = datetime.now().strftime('%Y-%m-%d %H:%M:%S')

        content = f"""# 运行结果导出

## 导出信息
- 导出时间：{now}
- 文件数量：{len(self.written)}
- 文件编码：{self.encoding}
"""
        for key, value in summary.items():
            content += f"- {key}：{value}\n"

        content += "\n## 文件列表\n"
        for path in self.written:
            content += f"- {path.name}\n"

        content += """
## 说明
- metrics.csv：每个epoch一行，浮点数保留6位小数
- weights.dmw1：DMW1格式的模型权重
- manifest.json：复现本次运行所需的命令、配置与种子
- model.json：规范化的模型描述
"""
        return content
