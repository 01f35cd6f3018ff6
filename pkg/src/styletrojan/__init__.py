"""Style-transfer backdoor toolkit: trigger generation, data poisoning,
controlled detoxification, backdoor scanners, and a robustness battery."""

__version__ = "0.1.0"
