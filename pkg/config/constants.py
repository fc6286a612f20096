"""
Centralized constants for roadsplat
"""

# Default semantic classes: (id, name, palette color)
# This list serves as the single source of truth when a manifest omits classes.
DEFAULT_CLASSES = [
    (0, "road", (128, 64, 128)),
    (1, "lane_line", (255, 255, 255)),
    (2, "crosswalk", (220, 220, 0)),
    (3, "road_marking", (250, 170, 30)),
    (4, "sidewalk_edge", (244, 35, 232)),
    (5, "terrain", (152, 251, 152)),
    (6, "sky", (70, 130, 180)),
]

# Road-surface elements: pixels with these labels enter the losses
DEFAULT_ROAD_CLASSES = [0, 1, 2, 3, 4]

# Label value for "no class" in label maps and BEV exports
VOID_LABEL = 255

# Geometry
NEAR_PLANE = 0.1  # meters
BEV_CAMERA_HEIGHT = 1000.0  # meters above the world origin

# Rasterization
LOW_PASS_FLOOR = 0.3  # px^2 added to the projected covariance diagonal
SPLAT_SIGMA_CUTOFF = 3.0
DET_EPSILON = 1e-12
TRANSMITTANCE_EPSILON = 1e-4
BEV_ALPHA_EPSILON = 1e-3

# Perspective culling box on the ground plane
CULL_LATERAL = 20.0  # meters, +/- along the camera x-axis
CULL_FORWARD = 40.0  # meters, along the camera z-axis

# Initialization
INITIAL_OPACITY = 0.9
INITIAL_COLOR = 0.5
VERTICAL_POSE_EPSILON = 1e-3
POSE_HASH_CELL_FACTOR = 4.0  # hash cell size in lattice resolutions

# Appearance initialization from the input frames
SEMANTIC_INIT_LOGIT = 3.0  # logit given to the observed class
CLIPPED_LEVEL = 0.002  # channel values this close to 0 or 1 count as clipped
MIN_EXPOSURE_SAMPLES = 50  # paired observations needed to estimate a camera
EXPOSURE_SAMPLE_LIMIT = 200000

# LiDAR elevation seeding
LIDAR_SEED_RADIUS = 0.3  # meters
LIDAR_SEED_NEIGHBORS = 8

# Training defaults
LR_ALPHA = 1e-4
LR_SCALE = 1e-4
LR_ROTATION = 1e-4
LR_Z_START = 1.6e-4
LR_Z_END = 1.6e-6
LR_COLOR = 0.008
LR_SEMANTICS = 0.1
LR_EXPOSURE = 0.001
REFERENCE_SCENE_SIZE = 10.0  # meters; lr_z scale factor is 1 at this extent
DIVERGENCE_FACTOR = 10.0

# Loss weights
LAMBDA_COLOR = 1.0
LAMBDA_SEMANTIC = 0.06
LAMBDA_SMOOTH = 0.003
LAMBDA_SMOOTH_LIDAR = 1.0
LAMBDA_ELEVATION = 0.02
SMOOTH_NEIGHBORS = 4

# Evaluation
PSNR_CAP = 99.0
ELEVATION_RADIUS = 0.1  # meters
ASSOCIATION_THRESHOLD = 0.1  # seconds
COVERAGE_ALPHA = 0.5

# BEV export
DEFAULT_RESOLUTION = 0.05  # meters per pixel
DEFAULT_EXPAND = 10.0  # road mask radius around the trajectory, meters
BEV_CHUNK_PIXELS = 2000

# Storage
SCENE_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"RSPLCKPT"
CHECKPOINT_VERSION = 1
