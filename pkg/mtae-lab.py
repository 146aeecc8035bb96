"""Starting point for mtae-lab."""
from lib.mtae_lab import start_program

if __name__ == "__main__":
    start_program()
