"""
Plain-text formatting for CLI output: metrics, reports and parameter tables.
"""
from coast.errors import CoastError


def format_metrics(psnr_db: float, ssim_value: float | None = None) -> str:
    text = f"PSNR {psnr_db:.2f} dB"
    if ssim_value is not None:
        text += f"  SSIM {ssim_value:.4f}"
    return text


def format_report(report, limit: int | None = None) -> str:
    """Fixed-width table of an EvalReport; `limit` keeps the first rows only."""
    rows = report.rows if limit is None else report.rows[:limit]
    if not rows:
        return f"{report.experiment}: no rows"
    width = max(len(r.dataset) for r in rows)
    lines = [f"{report.experiment} ({len(report.rows)} rows)",
             f"{'dataset':<{width}}  {'matrix':<22} seen {'gamma':>6} {'sigma':>7} {'method':<12} {'psnr':>7} {'ssim':>6}"]
    for r in rows:
        lines.append(
            f"{r.dataset:<{width}}  {r.matrix_id:<22} {'yes' if r.seen else 'no ':<4} "
            f"{r.gamma:>6.3f} {r.sigma:>7.4f} {r.method:<12} {r.psnr_db:>7.2f} {r.ssim:>6.4f}"
        )
    if limit is not None and len(report.rows) > limit:
        lines.append(f"... {len(report.rows) - limit} more")
    return "\n".join(lines)


def format_param_counts(counts: dict[str, int]) -> str:
    return "\n".join(f"({key}) {count:,}" for key, count in counts.items())


def format_error(exc: Exception) -> str:
    """One-line user-facing message."""
    if isinstance(exc, (CoastError, OSError)):
        return f"Error: {exc}"
    return f"Error: unexpected {type(exc).__name__}: {exc}"
