"""Discrete-event simulation of the FCFS G/G/n queue and its bound systems."""
from .core import (ARRIVAL, DEPARTURE, ENTER, EVENT_DTYPE, CalendarOverflow, EventTrace,
                   QueueModel, ResidualSnapshot, fcfs_schedule, simulate)
from .stationary import (InstabilityError, StationarySample, batch_means_ess, default_burn_in,
                         geweke_z, occupancy_histogram, stationary_sample)
from .bounds import (GGTailEstimate, InfiniteServerPath, gg_increments, gg_supremum_tail,
                     simulate_infinite_server_bound, wilson_interval)
