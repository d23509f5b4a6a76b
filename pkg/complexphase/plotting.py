"""Static line charts for reports; figures are rendered off-screen and saved as SVG."""
import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, ax, title, xlabel, ylabel):
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def plot_overlay(t, measured, predicted, title='Measured vs predicted', ylabel='v [pu]'):
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, measured, label='measured', linewidth=1.0)
    ax.plot(t, predicted, label='predicted', linewidth=1.0, linestyle='--')
    return _finish(fig, ax, title, 't [s]', ylabel)


def plot_spectrum(frequencies, spectra, title='Power spectrum of |v|'):
    fig, ax = plt.subplots(figsize=(8, 3))
    for label, power in spectra.items():
        ax.semilogy(frequencies[1:], power[1:], label=label, linewidth=1.0)
    return _finish(fig, ax, title, 'f [Hz]', 'PSD [pu^2/Hz]')


def plot_order_sweep(orders, scores, title='Validation R2 vs number of internal variables'):
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, values in scores.items():
        ax.plot(orders, values, marker='o', label=label)
    return _finish(fig, ax, title, 'n_ivars', 'R2')


def save_svg(fig, path):
    with plt.rc_context({'svg.hashsalt': 'complexphase', 'svg.fonttype': 'none'}):
        fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
