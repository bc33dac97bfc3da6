"""
Almacén SQLite de regiones detectadas, consultado por la API (server.py).
"""
import os
from typing import Iterator, List, Optional, Sequence

from sqlalchemy import Float, Integer, String, create_engine, delete, select
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column, sessionmaker

from .segment import RegionKind, RegionRecord

# --- Configuración ---
DATABASE_URL = os.environ.get("TFMODES_DB_URL", "sqlite:///tfmodes_regions.db")


class Base(DeclarativeBase):
    pass


class RegionRow(Base):
    __tablename__ = "regions"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    shot_id: Mapped[str] = mapped_column(String, index=True)
    channel_id: Mapped[str] = mapped_column(String, index=True)
    label: Mapped[int] = mapped_column(Integer)
    kind: Mapped[str] = mapped_column(String)
    f_min_khz: Mapped[float] = mapped_column(Float)
    f_max_khz: Mapped[float] = mapped_column(Float)
    t_min_ms: Mapped[float] = mapped_column(Float)
    t_max_ms: Mapped[float] = mapped_column(Float)
    amplitude: Mapped[float] = mapped_column(Float)
    amplitude_db: Mapped[float] = mapped_column(Float)
    pixel_count: Mapped[int] = mapped_column(Integer)

    def to_record(self) -> RegionRecord:
        return RegionRecord(
            label=self.label,
            kind=RegionKind(self.kind),
            f_min_khz=self.f_min_khz,
            f_max_khz=self.f_max_khz,
            t_min_ms=self.t_min_ms,
            t_max_ms=self.t_max_ms,
            amplitude=self.amplitude,
            amplitude_db=self.amplitude_db,
            pixel_count=self.pixel_count,
        )


def make_engine(url: Optional[str] = None) -> Engine:
    url = url or DATABASE_URL
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args)
    Base.metadata.create_all(engine)
    return engine


engine = None
SessionLocal = sessionmaker(autoflush=False, expire_on_commit=False)


def configure(url: Optional[str] = None) -> Engine:
    """(Re)configura el motor global usado por get_db."""
    global engine
    engine = make_engine(url)
    SessionLocal.configure(bind=engine)
    return engine


def get_db() -> Iterator[Session]:
    """Dependencia FastAPI: una sesión por peticion."""
    if engine is None:
        configure()
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def store_regions(db: Session, shot_id: str, channel_id: str, records: Sequence[RegionRecord]) -> int:
    """Sustituye las regiones previas del canal por las nuevas."""
    db.execute(delete(RegionRow).where(RegionRow.shot_id == shot_id, RegionRow.channel_id == channel_id))
    db.add_all(
        RegionRow(shot_id=shot_id, channel_id=channel_id, **r.model_dump(mode="json"))
        for r in records
    )
    db.commit()
    return len(records)


def query_regions(
    db: Session,
    shot_id: str,
    channel_id: Optional[str] = None,
    kind: Optional[RegionKind] = None,
    f_min_khz: Optional[float] = None,
    f_max_khz: Optional[float] = None,
) -> List[RegionRow]:
    stmt = select(RegionRow).where(RegionRow.shot_id == shot_id)
    if channel_id is not None:
        stmt = stmt.where(RegionRow.channel_id == channel_id)
    if kind is not None:
        stmt = stmt.where(RegionRow.kind == RegionKind(kind).value)
    # solapamiento con el intervalo pedido
    if f_min_khz is not None:
        stmt = stmt.where(RegionRow.f_max_khz >= f_min_khz)
    if f_max_khz is not None:
        stmt = stmt.where(RegionRow.f_min_khz <= f_max_khz)
    stmt = stmt.order_by(RegionRow.channel_id, RegionRow.label)
    return list(db.scalars(stmt))


def list_shots(db: Session) -> List[str]:
    return list(db.scalars(select(RegionRow.shot_id).distinct().order_by(RegionRow.shot_id)))
