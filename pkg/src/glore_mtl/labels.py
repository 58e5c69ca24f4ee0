"""Fixed label vocabularies shared by the segmentation and interaction heads.

Names and ordering are constants of the artifact; indices must stay stable
across runs because annotations, checkpoints, and metrics all refer to them
by position.
"""

SEG_CLASS_NAMES = (
    "background",
    "bipolar_forceps",
    "prograsp_forceps",
    "large_needle_driver",
    "monopolar_curved_scissors",
    "ultrasound_probe",
    "suction_tool",
    "clip_applier",
)
NUM_SEG_CLASSES = len(SEG_CLASS_NAMES)

INTERACTION_NAMES = (
    "idle",
    "grasping",
    "retraction",
    "tissue_manipulation",
    "tool_manipulation",
    "cutting",
    "cauterization",
    "suction",
    "looping",
    "suturing",
    "clipping",
    "staple",
    "ultrasound_sensing",
)
NUM_INTERACTION_CLASSES = len(INTERACTION_NAMES)

# Graph-node vocabulary: the single tissue vertex plus the seven instrument
# classes. Node semantic id k >= 1 equals segmentation class id k.
NODE_CATEGORY_NAMES = ("defective_tissue",) + SEG_CLASS_NAMES[1:]
NUM_NODE_CATEGORIES = len(NODE_CATEGORY_NAMES)
TISSUE_NODE_CATEGORY = 0
