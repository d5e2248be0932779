"""Neural ordinary differential equations fitted by multiple shooting."""

__version__ = '1.0.0'
