"""
Periodic jobs on a simulated integer-hour clock.

A builder-style scheduler in the spirit of ``schedule``: jobs are declared
with ``every(n, unit).do(func)`` and fired by ``run_pending(clock)``. Nothing
here reads wall time, which keeps hourly/daily/weekly cadences testable.

Usage:
    >>> scheduler = Scheduler()
    >>> scheduler.every(1, 'h').tag('daily').do(refresh, 'daily')
    >>> scheduler.every(1, 'w').do(refresh, 'monthly')
    >>> for hour in range(0, 672):
    >>>     scheduler.run_pending(hour)

A job fires at most once per ``run_pending`` call: missed periods collapse
into one run, and the next run is aligned to the period boundary after the
clock.
"""
from collections.abc import Hashable
import functools
from typing import Set, List, Optional, Callable

from drrel.exceptions import ScheduleError, ScheduleValueError
from drrel.log import logger

_UNIT_HOURS = {
    'h': 1, 'hour': 1, 'hours': 1,
    'd': 24, 'day': 24, 'days': 24,
    'w': 168, 'week': 168, 'weeks': 168,
}


class CancelJob(object):
    """
    Can be returned from a job to unschedule itself.
    """
    pass


class Scheduler(object):
    """
    Factory for :class:`Job` objects; keeps the registered jobs and fires the
    due ones when the simulated clock advances.
    """

    def __init__(self) -> None:
        self.jobs: List[Job] = []
        self.clock: Optional[int] = None

    def run_pending(self, clock: int) -> List["Job"]:
        """
        Run every job due at ``clock`` and return the jobs that ran.

        :param clock: current simulated hour; must not move backwards
        """
        if self.clock is not None and clock < self.clock:
            raise ScheduleValueError('clock moved backwards: {} < {}'.format(clock, self.clock))
        self.clock = clock
        ran = []
        for job in sorted(job for job in self.jobs if job.should_run(clock)):
            ret = job.run(clock)
            ran.append(job)
            if isinstance(ret, CancelJob) or ret is CancelJob:
                self.cancel_job(job)
        return ran

    def get_jobs(self, tag: Optional[Hashable] = None) -> List["Job"]:
        if tag is None:
            return self.jobs[:]
        return [job for job in self.jobs if tag in job.tags]

    def clear(self, tag: Optional[Hashable] = None) -> None:
        if tag is None:
            del self.jobs[:]
        else:
            self.jobs[:] = (job for job in self.jobs if tag not in job.tags)

    def cancel_job(self, job: "Job") -> None:
        try:
            self.jobs.remove(job)
        except ValueError:
            logger.debug('cancelling a job that is not scheduled', job=str(job))

    def every(self, number: int = 1, unit: str = 'h') -> "Job":
        """
        Schedule a new periodic job.

        :param number: a quantity of a certain time unit
        :param unit: "h"/"hour(s)", "d"/"day(s)" or "w"/"week(s)"
        :return: an unconfigured :class:`Job`
        """
        if unit not in _UNIT_HOURS:
            raise ScheduleValueError(f'time unit of {unit} not supported.')
        if int(number) < 1:
            raise ScheduleValueError('period must be at least one {}'.format(unit))
        return Job(int(number) * _UNIT_HOURS[unit], self)

    @property
    def next_run(self) -> Optional[int]:
        if not self.jobs:
            return None
        return min(self.jobs).next_run


class Job(object):
    """
    A periodic job of :class:`Scheduler`, firing once per ``period`` hours.

    The first run happens at the first ``run_pending`` call; later runs happen
    whenever the clock crosses into a new period (``clock // period`` grows).
    """

    def __init__(self, period: int, scheduler: Scheduler = None):
        self.period = period
        self.job_func: Optional[functools.partial] = None
        self.last_run: Optional[int] = None
        self.next_run: Optional[int] = None
        self.cancel_after: Optional[int] = None
        self.tags: Set[Hashable] = set()
        self.scheduler = scheduler

    def __lt__(self, other) -> bool:
        return (self.next_run, -self.period) < (other.next_run, -other.period)

    def __repr__(self):
        name = getattr(self.job_func, '__name__', repr(self.job_func))
        return 'Every {}h do {} (last run: {}, next run: {})'.format(
            self.period, name, self.last_run, self.next_run)

    def tag(self, *tags: Hashable):
        if not all(isinstance(tag, Hashable) for tag in tags):
            raise TypeError("Tags must be hashable")
        self.tags.update(tags)
        return self

    def until(self, hour: int):
        """Cancel the job once the clock passes ``hour``."""
        self.cancel_after = int(hour)
        return self

    def do(self, job_func: Callable, *args, **kwargs):
        """
        Register ``job_func(*args, clock=<hour>, **kwargs)`` as the job body.
        """
        if self.scheduler is None:
            raise ScheduleError("Job is not associated with a scheduler")
        self.job_func = functools.partial(job_func, *args, **kwargs)
        functools.update_wrapper(self.job_func, job_func)
        self.next_run = 0 if self.scheduler.clock is None else self.scheduler.clock
        self.scheduler.jobs.append(self)
        return self

    def should_run(self, clock: int) -> bool:
        if self.last_run is None:
            return True
        return clock // self.period > self.last_run // self.period

    def run(self, clock: int):
        if self.cancel_after is not None and clock > self.cancel_after:
            return CancelJob
        ret = self.job_func(clock=clock)
        self.last_run = clock
        self.next_run = (clock // self.period + 1) * self.period
        return ret
