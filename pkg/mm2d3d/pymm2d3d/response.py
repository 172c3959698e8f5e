"""
Command response object shared by all mm2d3d commands.
"""

# pymm2d3d
from .errors import Mm2d3dError, EXIT_OK


class CommandResponse():
    """
    Response of one mm2d3d command:
        {
            'status': 'success' | 'failed' | 'pending',
            'data': {...},
            'errors': [{'reason': str, 'msg': str}],
            'msgs': [str, ...]
        }
    """

    def __init__(self) -> None:
        self._status = 'pending'
        self._data = {}
        self._errors = []
        self._msgs = []
        self._exit_code = EXIT_OK

    def set_success(self, msg: str = None) -> None:
        self._status = 'success'
        if msg:
            self._msgs.append(msg)

    def set_data(self, data: dict) -> None:
        """
        Set the data of the response.
        """
        if not isinstance(data, dict):
            raise ValueError("The data must be a dict.")
        self._data = data

    def add_msg(self, msg: str) -> None:
        self._msgs.append(msg)

    def _add_error(self,
                   err_reason: str,
                   err_msg: str) -> None:
        if not isinstance(err_reason, str):
            raise ValueError("The err_reason must be a string.")
        if not isinstance(err_msg, str):
            raise ValueError("The err_msg must be a string.")
        self._errors.append({
            'reason': err_reason,
            'msg': err_msg
        })

    def set_failed(self,
                   reason: str,
                   err_msg: str,
                   exit_code: int) -> None:
        """
        Set the response status as failed.
        """
        self._status = 'failed'
        self._exit_code = exit_code
        self._add_error(reason, err_msg)

    def raise_library_error(self, exc: Mm2d3dError) -> None:
        """
        Record a library exception as the failure reason.
        """
        self.set_failed(exc.reason, str(exc), exc.exit_code)

    def to_dict(self) -> dict:
        return {
            'status': self._status,
            'data': self._data,
            'errors': self._errors,
            'msgs': self._msgs
        }

    @property
    def data(self) -> dict:
        return self._data

    @property
    def errors(self) -> list:
        return self._errors

    @property
    def msgs(self) -> list:
        return self._msgs

    @property
    def exit_code(self) -> int:
        return self._exit_code

    @property
    def succeeded(self) -> bool:
        return self._status == 'success'
