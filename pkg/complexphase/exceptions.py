class NumericalError(ArithmeticError):
    pass


class IntegrationError(NumericalError):
    def __init__(self, message, t):
        super().__init__(f"{message} (t = {t:.6f} s)")
        self.t = t


class IdentificationError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
