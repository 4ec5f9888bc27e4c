class UMFError(ValueError):
    """Error carrying a stable machine-readable code such as ``"empty-grid"``."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)
