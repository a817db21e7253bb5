""" Layout and constants of the UCI HAR archive (raw inertial signals) """

##### UCI HAR DATASET #####
# Nine inertial channels, one whitespace-delimited file per channel and split
SIGNALS = ["body_acc_x", "body_acc_y", "body_acc_z",
           "body_gyro_x", "body_gyro_y", "body_gyro_z",
           "total_acc_x", "total_acc_y", "total_acc_z"]
SIGNAL_DIR = "Inertial Signals"
SPLITS = ("train", "test")

# 2.56 s windows at 50 Hz
WINDOW_LENGTH = 128
N_CHANNELS = len(SIGNALS)

# Labels are stored 1-based
CLASS_NAMES = ["WALKING", "WALKING_UPSTAIRS", "WALKING_DOWNSTAIRS", "SITTING", "STANDING", "LAYING"]
N_CLASSES = len(CLASS_NAMES)
LABEL_OFFSET = 1

N_TRAIN = 7352
N_TEST = 2947

# Archive root name when unpacked from the UCI download
ARCHIVE_DIR = "UCI HAR Dataset"


def signal_path(root, split, signal):
    return root / split / SIGNAL_DIR / f"{signal}_{split}.txt"


def label_path(root, split):
    return root / split / f"y_{split}.txt"
