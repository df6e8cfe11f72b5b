"""DEAP mapping workbench: simulated atrial tissue, catheter electrograms and membrane-potential reconstruction."""

__version__ = "0.1.0"
