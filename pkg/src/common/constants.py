"""
应用程序常量定义
集中管理所有硬编码的常量值：默认超参数、文件格式与退出码
"""

# 应用程序基本信息
APP_NAME = "EssenceKit"
APP_VERSION = "0.3.0"
APP_TITLE = "本质迁移工具"
CLI_NAME = "essencekit"

# 数值配置
COSINE_EPS = 1e-12              # 余弦运算的范数下限，低于此值视为零向量
GRADCHECK_STEP = 1e-5           # 有限差分步长
FID_JITTER = 1e-6               # 矩阵平方根失败时的对角抖动

# 损失权重（所有实验共用同一组取值）
DEFAULT_LAMBDA_CONSISTENCY = 0.5
DEFAULT_LAMBDA_L2 = 0.003

# 本质优化默认配置
DEFAULT_OPT_ITERATIONS = 1000
DEFAULT_OPT_LEARNING_RATE = 0.2
DEFAULT_OPT_BATCH_SIZE = 4
DEFAULT_ADAM_BETA1 = 0.9
DEFAULT_ADAM_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_NOISE_SIGMA = 1e-3      # 噪声初始化标准差，避免 b = 0 处的一致性奇点
DEFAULT_SEED = 0

INIT_NOISE = "noise"
INIT_TARGET_INVERSION = "target_inversion"
INIT_MODES = (INIT_NOISE, INIT_TARGET_INVERSION)

# 本质编码器微调默认配置
DEFAULT_ENC_LEARNING_RATE = 1e-4
DEFAULT_ENC_ITERATIONS = 3000
DEFAULT_ENC_TARGETS_PER_STEP = 1
DEFAULT_ENC_BATCH_SIZE = 5
DEFAULT_ENC_TRAIN_SET_SIZE = 200
DEFAULT_ENC_EVAL_SET_SIZE = 50
DEFAULT_ENC_EVAL_EVERY = 500

# 玩具后端尺寸（足够让梯度检查有意义，又足够小以便有限差分）
TOY_LATENT_SHAPE = (3, 8)       # (L, D)
TOY_IMAGE_SHAPE = (8, 8, 1)     # (H, W, C)
TOY_EMBED_DIM = 16              # E
TOY_FEATURE_DIM = 8             # F
TOY_IDENTITY_DIM = 16
TOY_WARP = 0.5                  # toy-warped 配置的非线性强度
TOY_SEED = 7
TOY_INTERCHANGE_SIGMAS = 8.0    # PNG 交换区间 = ±该倍数 × 最大像素标准差

# 适配器配置（预训练模型的约定形状）
ADAPTER_LATENT_SHAPE = (18, 512)
ADAPTER_IMAGE_SHAPE = (1024, 1024, 3)
ADAPTER_FEATURE_DIM = 2048

# 评估配置
FID_REFERENCE_SIZE = 7000       # 自然图像参考集大小
TOY_REFERENCE_SIZE = 1000        # 玩具配置下由生成器自身分布抽取的参考集大小
FID_REFERENCE_BATCH = 64        # 由生成器抽取参考集时每批解码的数量
TOY_FIXTURE_TARGETS = 10
TOY_FIXTURE_POOL = 8            # 优化所用的训练源池
TOY_FIXTURE_HELD_OUT = 12       # 留出源（需 >= F + 1 才能计算逐目标 FID）
TOY_FIXTURE_ENCODER_TARGETS = 20
ABLATION_VARIANTS = ("full", "no_consistency", "no_similarity", "no_l2")
METHOD_OPTIMIZER = "optimizer"
METHOD_ENCODER = "encoder"
REPORT_PERCENT_SCALE = 100.0

# 文件格式配置
ESSV_MAGIC = b"ESSV1"
ESSV_SUFFIX = ".essv"
SIDECAR_SUFFIX = ".json"
DELTA_SUFFIX = ".npy"
SUPPORTED_IMAGE_FORMATS = [
    ('.png', 'PNG'),
    ('.jpg', 'JPEG'),
    ('.jpeg', 'JPEG'),
]
GRID_EXPORT_FORMATS = ('PNG', 'JPG', 'PDF')

MANIFEST_FILENAME = "run_manifest.json"
TRACE_FILENAME = "trace.json"
TARGETS_META_FILENAME = "targets.json"
REPORT_JSON_FILENAME = "report.json"
REPORT_CSV_FILENAME = "metrics.csv"
FID_CSV_FILENAME = "fid.csv"
REPORT_CSV_COLUMNS = ["target_id", "source_id", "id_source", "id_target", "sem_clip", "sem_blip"]

# 网格图配置
GRID_CELL_SIZE = 128            # 每个缩略图单元的边长（像素）
GRID_SPACING = 4
GRID_MARGIN = 8
GRID_BACKGROUND = (255, 255, 255)
GRID_LAYOUT_ROWS = "rows"          # 目标行、源行、结果行
GRID_LAYOUT_MATRIX = "matrix"      # 目标 × 源 交叉矩阵
GRID_LAYOUTS = (GRID_LAYOUT_ROWS, GRID_LAYOUT_MATRIX)

# 环境变量
ENV_PROFILE_DIR = "ESSENCEKIT_PROFILE_DIR"

# 退出码
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_BACKEND_ERROR = 2
EXIT_NUMERIC_ERROR = 3
