from .terminal import TerminalReport, sweep_table
