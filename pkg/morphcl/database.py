from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path
from typing import Iterator

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import DeclarativeBase, Session, sessionmaker

from morphcl.settings import settings


# Base class for models
class Base(DeclarativeBase):
    pass


def registry_url(out_dir: Path) -> str:
    return f"sqlite:///{Path(out_dir).resolve() / settings.registry_name}"


@lru_cache
def get_engine(url: str) -> Engine:
    from morphcl import models  # noqa: F401  registers the tables

    engine = create_engine(url, echo=False)
    Base.metadata.create_all(engine)
    return engine


@contextmanager
def get_session(out_dir: Path) -> Iterator[Session]:
    """Session on the run registry inside `out_dir`; commits on success"""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    SessionLocal = sessionmaker(get_engine(registry_url(out_dir)), expire_on_commit=False)
    with SessionLocal() as session:
        try:
            yield session
            session.commit()
        except Exception:
            session.rollback()
            raise
