""" Default hyperparameters of the published HAR recipe and of the distillation step """

# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# TEACHER / BASELINE RECIPE
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
TEACHER_EPOCHS = 100
TEACHER_LR = 0.05
OPTIMIZER = "adam"
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 0.0
BATCH_SIZE = 128

# ReduceLROnPlateau on the training loss
PLATEAU_PATIENCE = 10
PLATEAU_FACTOR = 0.1
PLATEAU_MONITOR = "train_loss"

# Training-time dropout of the single HAR dropout layer
TEACHER_DROPOUT = 0.2

# Off for HAR; the Biovid recipe stops early on validation loss
EARLY_STOP_PATIENCE = 10

# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# DISTILLATION
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
N_REPRESENTATIONS = 30
TEACHER_DISTILL_DROPOUT = 0.2
STUDENT_DROPOUT = 0.1
ATTENTION_TEMPERATURE = 5.0
PERCENTILE_EPS = 90.0
DIST_WEIGHT = 0.2
TOP_K = 15

# Student uses the teacher's optimizer settings and epoch budget
STUDENT_EPOCHS = TEACHER_EPOCHS

# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# BASELINES
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
ENSEMBLE_MEMBERS = 25
SMOKE_MEMBERS = 5

# Soup members are short fine-tunes of the teacher
SOUP_FINETUNE_EPOCHS = 10
SOUP_LR_SCALE = 0.1

# SWA averages the last quarter of a run
SWA_START_FRACTION = 0.75

# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# DATA
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
VAL_FRACTION = 0.1
SPLIT_SEED = 0
NORM_STD_FLOOR = 1e-8

# Synthetic corpus calibrated so a teacher stays below perfect accuracy
SYNTH_CLASSES = 4
SYNTH_CHANNELS = 1
SYNTH_LENGTH = 64
SYNTH_SAMPLES = 2000
SYNTH_NOISE = 0.5
SYNTH_HIDDEN = (128, 64)

# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
# ABLATION GRIDS
# %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%
EPS_GRID = [20, 30, 50, 60, 70, 80, 90, 100]
DROPOUT_GRID = [0.1, 0.2, 0.5, 0.9]
N_GRID = [10, 20, 30, 50]
TOP_K_GRID = [(10, 3), (20, 10), (30, 15), (50, 30)]
# h = 1 is the sharp, unregularized attention
TEMPERATURE_GRID = [1.0, ATTENTION_TEMPERATURE]
