from .monitor import Alert, AcceptanceMonitor
