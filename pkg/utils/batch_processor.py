from typing import Any, Callable, List, Optional, Sequence
from concurrent.futures import ThreadPoolExecutor
import logging

from config import RuntimeConfig

class BatchProcessor:
    """批量处理管理器（线程池，结果保持输入顺序）"""

    def __init__(
        self,
        max_workers: int = RuntimeConfig.THREADS,
        progress_callback: Optional[Callable[[float, str], None]] = None
    ):
        self.max_workers = max(1, int(max_workers))
        self.progress_callback = progress_callback
        self.logger = logging.getLogger(__name__)
        self._executor = None

    def __enter__(self):
        if self.max_workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.max_workers)
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def process_batch(
        self,
        items: Sequence[Any],
        process_func: Callable[[Any], Any],
        description: str = "处理中"
    ) -> List[Any]:
        """并行处理，返回与 items 同序的结果；任一项失败则抛出"""
        total_items = len(items)
        try:
            if self.max_workers == 1 or total_items <= 1:
                results = []
                for index, item in enumerate(items):
                    results.append(process_func(item))
                    self._report(index + 1, total_items, description)
                return results

            executor = self._executor or ThreadPoolExecutor(max_workers=self.max_workers)
            try:
                futures = [executor.submit(process_func, item) for item in items]
                results = []
                # 按提交顺序收集，保证归约顺序固定
                for index, future in enumerate(futures):
                    results.append(future.result())
                    self._report(index + 1, total_items, description)
                return results
            finally:
                if executor is not self._executor:
                    executor.shutdown(wait=True)

        except Exception as e:
            self.logger.error(f"批处理失败 ({description}): {str(e)}")
            raise

    def _report(self, done: int, total: int, description: str):
        if self.progress_callback and total:
            self.progress_callback(done / total, description)
