import os
import sys


sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from celery import Celery

from config import config

app = Celery('probe_gap_tasks',
             broker=config.REDIS_URL,
             backend=config.REDIS_URL,
             include=['tasks'])
app.conf.update(
    task_serializer='json',
    result_serializer='json',
    accept_content=['json'],
    # one adapter per worker process; run workers with -c 1
    worker_prefetch_multiplier=1,
    task_acks_late=True,
)
