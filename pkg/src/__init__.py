"""Multi-scene camera relocalization by scene coordinate regression"""

__version__ = "1.0.0"
__author__ = "Multi-Scene Reloc contributors"
