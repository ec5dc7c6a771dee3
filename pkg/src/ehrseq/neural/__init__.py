"""From-scratch neural stack: kernels, autodiff tape, transformer layers."""
