import logging

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from motion_features import decode_to_global, local_frames  # noqa: E402
from skeleton import JOINT_NAMES  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_JOINTS = ('pelvis', 'head', 'left_foot', 'right_foot', 'left_wrist', 'tail3')


def plot_joint_trajectories(seq, path, joints=DEFAULT_JOINTS, title=None):
    """World-space x/y/z over time for the named joints, one panel per axis."""
    world = decode_to_global(seq).joints_world
    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)
    frames = np.arange(world.shape[0])
    for name in joints:
        j = JOINT_NAMES.index(name)
        for axis, ax in enumerate(axes):
            ax.plot(frames, world[:, j, axis], label=name)
    for axis, ax in zip('xyz', axes):
        ax.set_ylabel(f'{axis} (m)')
    axes[-1].set_xlabel('frame')
    axes[0].legend(loc='upper right', fontsize='small', ncol=3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info('wrote trajectory plot %s', path)
    return path


def plot_seam_continuity(seq, seams, path, title=None):
    """Per-step max joint displacement with seam steps marked."""
    joints = local_frames(seq)
    jumps = np.linalg.norm(np.diff(joints, axis=0), axis=-1).max(axis=-1)
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(np.arange(len(jumps)), jumps, color='tab:blue', label='max joint step')
    ax.axhline(np.median(jumps), color='gray', linestyle=':', label='median')
    for t in seams:
        ax.axvline(t, color='tab:red', linestyle='--')
    ax.set_xlabel('frame')
    ax.set_ylabel('displacement (m)')
    ax.legend(loc='upper right', fontsize='small')
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info('wrote seam plot %s', path)
    return path
