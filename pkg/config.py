class TrainConfigDefaults:
    """训练默认配置"""
    # 优化器
    LR0 = 0.01
    MOMENTUM = 0.9
    WEIGHT_DECAY = 0.0001
    BATCH_SIZE = 64
    EPOCHS = 20
    SEED = 1

    # 学习率平台衰减
    PLATEAU_WINDOW = 3  # epoch
    PLATEAU_MIN_DELTA = 0.001  # 训练top-1绝对提升
    PLATEAU_FACTOR = 0.1
    PLATEAU_METRIC = "train_top1"  # 或 train_loss

    # 数据增强
    CROP_PAD = 0
    FLIP_PROB = 0.5

    # 只对这些参数做权重衰减
    DECAY_PARAMS = ("weight", "vertical", "horizontal")

    @staticmethod
    def get_config() -> dict:
        """获取默认训练配置"""
        return {
            "lr0": TrainConfigDefaults.LR0,
            "momentum": TrainConfigDefaults.MOMENTUM,
            "weight_decay": TrainConfigDefaults.WEIGHT_DECAY,
            "batch_size": TrainConfigDefaults.BATCH_SIZE,
            "epochs": TrainConfigDefaults.EPOCHS,
            "seed": TrainConfigDefaults.SEED,
        }

class ModelConfig:
    """模型与层配置"""
    # 批归一化
    BN_MOMENTUM = 0.1
    BN_EPS = 1e-5

    # 全连接头默认隐藏层
    DEFAULT_HIDDEN = (4096, 4096)

    # 小矩阵SVD
    SVD_MAX_DIM = 32
    JACOBI_TOL = 1e-13
    JACOBI_MAX_SWEEPS = 60

    # 初始化方案
    INIT_SCHEMES = ("xavier", "kaiming")
    DEFAULT_INIT = "kaiming"

class DataConfig:
    """数据读写配置"""
    # 环境变量
    DATA_ENV_VAR = "DECOMPOSEME_DATA"

    # MNIST文件名
    MNIST_FILES = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    IDX_IMAGES_MAGIC = 0x00000803
    IDX_LABELS_MAGIC = 0x00000801

    # CIFAR-10二进制
    CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
    CIFAR_TEST_FILE = "test_batch.bin"
    CIFAR_RECORDS_PER_FILE = 10000
    CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32

    # 合成数据
    SYNTH_IMAGE_SIZE = 12
    SYNTH_KINDS = ("blobs", "separable_bars")

    # 权重文件
    WEIGHTS_MAGIC = b"DMW1"
    FILE_ENCODING = "utf-8"

class RuntimeConfig:
    """运行配置"""
    THREADS = 1
    EVAL_BATCH = 256
    TIME_REPEATS = 3
    TIME_BATCH = 8
    CSV_FLOAT_FORMAT = "%.6f"

class DiagramConfig:
    """结构图配置"""
    PRIMARY_COLOR = "#1e3a8a"
    SECONDARY_COLOR = "#3b82f6"
    ACCENT_COLOR = "#60a5fa"
    BORDER_COLOR = "#94a3b8"
    ERROR_COLOR = "#ef4444"
    FONT_FAMILY = "Helvetica"
    FORMAT = "png"
