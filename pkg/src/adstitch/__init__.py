"""Ad asset pipeline: factuality filtering, diverse selection and real-time stitching."""

__version__ = "0.1.0"
