class DecomposeMeError(Exception):
    """工具包异常基类"""
    exit_code = 1

class DimensionError(DecomposeMeError):
    """张量维度不匹配"""
    pass

class ConfigurationError(DecomposeMeError):
    """层配置不合法（输出尺寸非整数等）"""
    pass

class InputError(DecomposeMeError):
    """输入参数错误"""
    pass

class InfeasibleError(DecomposeMeError):
    """分解预算无法满足"""
    pass

class SemanticError(DecomposeMeError):
    """操作在当前语义下无定义"""
    pass

class SpecParseError(DecomposeMeError):
    """模型描述文档解析错误"""

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer or "/"
        super().__init__(f"{self.pointer}: {message}")

class ValidationError(DecomposeMeError):
    """模型描述校验失败"""
    pass

class FormatError(DecomposeMeError):
    """二进制文件格式错误"""
    exit_code = 2

class DivergenceError(DecomposeMeError):
    """训练发散（损失非有限值）"""
    exit_code = 2

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"训练发散: epoch={epoch} batch={batch} loss={loss}")
