"""
Progress lines for the training commands.
"""


def progress_printer(command, total: int, every: int = 0):
    """Callback writing one line every ``every`` steps (about 20 lines per run by default)."""
    every = every or max(1, total // 20)

    def report(row):
        step = row['iteration'] + 1
        if step % every and step != total:
            return
        line = (f'step {step}/{total}  lr {row["lr"]:.3g}  loss {row["batch_loss"]:.4f}  '
                f'reg {row["reg_loss"]:.4f}  total {row["total_loss"]:.4f}')
        if row['val_accuracy'] is not None:
            line += f'  val {row["val_accuracy"]:.3f}'
        command.stdout.write(line)

    return report
