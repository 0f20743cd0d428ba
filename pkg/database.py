# database.py
import os
from contextlib import contextmanager

from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

# sqlite by default; any SQLAlchemy URL works (e.g. postgresql+psycopg://...)
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./datasets.db")

Base = declarative_base()

_engines: dict[str, Engine] = {}


def _sqlite_pragmas(dbapi_connection, connection_record):
    cursor = dbapi_connection.cursor()
    try:
        cursor.execute("PRAGMA journal_mode=WAL;")
        cursor.execute("PRAGMA synchronous=NORMAL;")
    finally:
        cursor.close()


def get_engine(url: str | None = None) -> Engine:
    url = url or DATABASE_URL
    engine = _engines.get(url)
    if engine is None:
        engine = create_engine(
            url,
            echo=False,         # set True only when debugging
            future=True,
            pool_pre_ping=True,
        )
        if url.startswith("sqlite"):
            event.listen(engine, "connect", _sqlite_pragmas)
        # importing models registers the tables on Base.metadata
        import models  # noqa: F401
        Base.metadata.create_all(engine)
        _engines[url] = engine
    return engine


@contextmanager
def get_db(url: str | None = None):
    factory = sessionmaker(get_engine(url), expire_on_commit=False, class_=Session)
    with factory() as session:
        yield session
