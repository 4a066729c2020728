"""taskgrid: a master/worker bag-of-tasks framework with capability-aware
(GPU vs CPU) FCFS round-robin dispatch and a Sobel edge-detection workload."""

__version__ = "0.1.0"
