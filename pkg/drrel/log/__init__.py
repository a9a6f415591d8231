import time
import sys
import os
import json
import inspect
import platform
from drrel.common.log import LoggerLevel, LogRecord, BaseHandler

# keyword names taken by the LogRecord constructor
RESERVED_FIELDS = frozenset(('name', 'level', 'msg', 'args', 'exc_info', 'debuginfo'))


class StdoutHandler(BaseHandler):
    terminator = '\n'
    format_str = "[{created}] [{hostname}.{process}] [{level}] [{name}] [{message}]"

    def __init__(self, stream=None, level="DEBUG", **kwargs):
        self.stream = stream
        self.set_level(level)

    @property
    def target(self):
        # resolved late so pytest's capsys sees our writes
        return self.stream if self.stream is not None else sys.stdout

    def flush(self):
        if hasattr(self.target, "flush"):
            self.target.flush()

    def emit(self, record):
        try:
            self.target.write(self.make_message(record) + self.terminator)
            self.flush()
        except Exception:
            self.handle_error(record)

    def make_message(self, record):
        data = record.to_dict()
        data['created'] = time.strftime("%Y-%m-%d %H:%M:%S %z", time.localtime(data['created']))
        extra_data = data.pop('data')
        msg = self.format_str.format(**data)
        extra = ' '.join("[{} = {}]".format(k, json.dumps(v, sort_keys=True)) for k, v in extra_data.items())
        if extra:
            msg = ' '.join([msg, extra])
        return msg

    def __repr__(self):
        return '<%s (%s)>' % (self.__class__.__name__, self.level)


class JsonlHandler(BaseHandler):
    """Appends one JSON object per record to ``path``."""
    terminator = '\n'

    def __init__(self, path, level="DEBUG", **kwargs):
        self.path = path
        self.set_level(level)
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self._fh = None

    def _open(self):
        if self._fh is None:
            self._fh = open(self.path, 'a', encoding='utf-8')
        return self._fh

    def flush(self):
        if self._fh is not None:
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def emit(self, record):
        try:
            fh = self._open()
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + self.terminator)
            fh.flush()
        except Exception:
            self.handle_error(record)

    def __repr__(self):
        return '<%s [%s](%s)>' % (self.__class__.__name__, self.path, self.level)


class Logger(object):
    handler_class_map = {
        'stdout': StdoutHandler,
        'jsonl': JsonlHandler,
    }

    def __init__(self, name="", handlers=None, bound=None):
        self.name = name
        self.handlers = handlers if handlers is not None else []
        self.bound = dict(bound or {})
        self.hostname = platform.node()

    def init(self, config):
        for handler in config['handlers']:
            conf = dict(config.get(handler, {}))
            handler_type = conf.pop('handler_type', '')
            if handler_type not in self.handler_class_map:
                continue
            self.add(handler_type, **conf)

    def add(self, handler, level="DEBUG", **kwargs):
        h_cls = self.handler_class_map.get(handler)
        if not h_cls:
            raise Exception('no handler class for {}'.format(handler))
        h = h_cls(level=level, **kwargs)
        self.handlers.append(h)
        return h

    def clear(self):
        for h in self.handlers:
            h.close()
        del self.handlers[:]

    def bind(self, **fields):
        """Child logger sharing our handlers whose records always carry ``fields``."""
        merged = dict(self.bound)
        merged.update(fields)
        return Logger(self.name, handlers=self.handlers, bound=merged)

    def get_debuginfo(self):
        for frame in inspect.stack()[1:]:
            if not frame.filename.endswith(os.path.join('drrel', 'log', '__init__.py')):
                return '{}:{}'.format(frame.filename, frame.lineno)
        return 'no-frameinfo'

    def log(self, level, message, args, kwargs):
        levelno = LoggerLevel.get_levelno(level)
        handlers = [h for h in self.handlers if levelno >= h.levelno]
        if not handlers:
            return None
        exc_info = kwargs.pop('exc_info', None)
        fields = dict(self.bound)
        fields.update(kwargs)
        fields = dict((k + '_' if k in RESERVED_FIELDS else k, v) for k, v in fields.items())
        debuginfo = self.get_debuginfo() if level == "DEBUG" else ":0"
        record = LogRecord(self.name, level, message, args, exc_info, debuginfo=debuginfo, **fields)
        for handler in handlers:
            handler.emit(record)

    def debug(self, message, *args, **kwargs):
        self.log('DEBUG', message, args, kwargs)

    def info(self, message, *args, **kwargs):
        self.log('INFO', message, args, kwargs)

    def warning(self, message, *args, **kwargs):
        self.log('WARNING', message, args, kwargs)

    def error(self, message, *args, **kwargs):
        self.log('ERROR', message, args, kwargs)

    def critical(self, message, *args, **kwargs):
        self.log('CRITICAL', message, args, kwargs)

    def exception(self, message, *args, exc_info=True, **kwargs):
        self.error(message, *args, exc_info=exc_info, **kwargs)


logger = Logger("drrel")
