"""Multi-contrast compressed-sensing MRI reconstruction toolkit.

Modules
-------
kspace       FFTs, sampling masks, measurements and the data-fidelity operator
imaging      slice stacks, dataset ingestion, phantoms and augmentation
autodiff     tape-based reverse-mode differentiation for the network ops
models       DIRN / DFSN / DISN networks and checkpoints
training     Xavier init, ADAM and the training loop
fcsa         FCSA-MT joint-TV plus group-wavelet baseline
metrics      PSNR, SSIM and error maps
experiments  shift-robustness and block-count drivers
cli          the ``mcmri`` command
"""

__version__ = "0.1.0"
