'''
pyspacedet/plots.py

Convergence and precision/recall figures.
'''

import logging

import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)


def _finish(title, output_fn, show):
    if title is not None:
        plt.title(title)
    # Remove unnecessary axes.
    ax = plt.gca()
    ax.spines['top'].set_visible(False)
    ax.spines['right'].set_visible(False)
    fig = plt.gcf()
    if output_fn:
        fig.savefig(output_fn, bbox_inches="tight")
        logger.info("[plots] wrote %s", output_fn)
    if show:
        plt.show()
    return fig


def plot_loss_trace(trace, show=True, title=None, output_fn=None, log_y=True):
    """
    Plot distillation loss against epoch.

    Args:
        trace: LossTrace from distillkernel.distill
        show: call show function
        title: plot title, if provided
        output_fn: save the figure to this file, if provided
        log_y: logarithmic loss axis

    Returns:
        matplotlib Figure.
    """
    epochs = np.arange(len(trace.epoch_loss) + 1)
    plt.figure(figsize=[8, 5])
    plt.plot(epochs, [trace.initial_loss] + list(trace.epoch_loss), 'k',
             label="mean batch loss")
    if trace.full_batch:
        plt.plot(epochs, [trace.initial_loss] + list(trace.full_batch), 'b--',
                 label="full-batch loss")
    if log_y:
        plt.yscale("log")
    plt.xlabel("epoch")
    plt.ylabel("feature regression loss")
    plt.xlim([0, max(1, len(trace.epoch_loss))])
    plt.legend(loc="upper right")
    return _finish(title, output_fn, show)


def plot_pr_curve(curve, show=True, title=None, output_fn=None, label=None):
    """
    Plot precision against recall for a PRCurve, with its monotone
    envelope.

    Args:
        curve: metrics.PRCurve
        show: call show function
        title: plot title, if provided
        output_fn: save the figure to this file, if provided
        label: legend label for the raw curve

    Returns:
        matplotlib Figure.
    """
    from pyspacedet.metrics import precision_envelope
    plt.figure(figsize=[8, 5])
    if len(curve):
        recall = np.concatenate(([0.0], curve.recall))
        precision = np.concatenate(([curve.precision[0]], curve.precision))
        plt.plot(recall, precision, 'k.-', label=label or "precision")
        plt.step(recall, precision_envelope(precision), 'b', where="post",
                 alpha=0.5, label="envelope")
    plt.xlabel("recall")
    plt.ylabel("precision")
    plt.xlim([0, 1.02])
    plt.ylim([0, 1.05])
    plt.legend(loc="lower left")
    return _finish(title, output_fn, show)
