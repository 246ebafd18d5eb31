"""Row-centric CNN training on numpy: 2PS, OverL, hybrids with checkpointing,
a column-centric oracle, a memory planner and a logical-byte meter."""

__version__ = "0.1.0"
