"""
Main entry point for the quantkern command line.

    python app.py verify --filter matvec
    python app.py bench --preset decode prefill512 --format q8_0 --kv-depth 0,2048
    python app.py tune --op matvec --csv results/tune.csv
    python app.py cluster results/devices.csv --k 3
    python app.py breakdown --kv-depth 0,512,2048
    python app.py inspect model.gguf
    python app.py extract model.gguf blk.0.attn_q.weight --dequant --output q.npy
    python app.py kernels
"""
import sys

from quantkern.app import main

if __name__ == "__main__":
    sys.exit(main())
