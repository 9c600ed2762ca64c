"""Exception types raised across segbench."""


class SegbenchError(Exception):
    pass


class ShapeError(SegbenchError, ValueError):
    pass


class DomainError(SegbenchError, ValueError):
    pass


class ConfigError(SegbenchError, ValueError):
    pass


class FormatError(SegbenchError, ValueError):
    pass


class DegenerateLabels(SegbenchError, ValueError):
    pass


class OutputExists(SegbenchError, FileExistsError):
    pass


class TrainingDiverged(SegbenchError, RuntimeError):
    def __init__(self, epoch, batch, loss, fold=None):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.fold = fold
        where = f"epoch {epoch}, batch {batch}"
        if fold is not None:
            where = f"fold {fold}, " + where
        super().__init__(f"non-finite loss {loss!r} at {where}")
