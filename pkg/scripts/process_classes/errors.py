'''

Exception hierarchy shared by every flowlens process class. Each error carries the exit code the command line
hands back to the shell: 1 for bad inputs, 2 for anything that went wrong talking to the audience estimate API.

'''

class FlowLensError(Exception):
    '''Base class for all flowlens failures'''
    exit_code = 1


class InputValidationError(FlowLensError, ValueError):
    '''Raised when an input value, file row or config entry breaks a documented rule.

    errors holds (line_number, message) pairs when the problem came from a file so every rejected row can be
    reported in one go.
    '''
    exit_code = 1

    def __init__(self, message:str, errors:list=None, path=None) -> None:
        self.errors = list(errors or [])
        self.path = path
        if self.errors:
            detail = '; '.join(f'line {line}: {msg}' for line, msg in self.errors)
            message = f'{message} ({detail})'
        if path is not None:
            message = f'{path}: {message}'
        super().__init__(message)


class SnapshotConflictError(InputValidationError):
    '''Same (country, language, week) key already stored with a different audience value'''

    def __init__(self, key:tuple, stored_mau:int, new_mau:int) -> None:
        self.key = key
        self.stored_mau = stored_mau
        self.new_mau = new_mau
        country, language, week = key
        super().__init__(f'conflicting audience for {country}-{language}-w{week}: stored {stored_mau}, got {new_mau}')


class TransportError(FlowLensError):
    '''Network level failure. Retryable unless a subclass says otherwise'''
    exit_code = 2
    retryable = True


class QuotaError(TransportError):
    '''Rate limit, permission or token problems reported by the API'''
    retryable = False

    def __init__(self, message:str, status_code:int=None) -> None:
        self.status_code = status_code
        super().__init__(message)


class MalformedResponseError(TransportError):
    '''Response body could not be turned into an audience estimate'''
    retryable = False

    def __init__(self, message:str, payload=None) -> None:
        self.payload = payload
        super().__init__(message)
