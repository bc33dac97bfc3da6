import json
import logging
from typing import List, Optional

from fastapi import APIRouter, Depends, FastAPI, HTTPException, Query
from pydantic import BaseModel
from sqlalchemy.orm import Session
from starlette.middleware.cors import CORSMiddleware

from . import __version__, database
from .database import get_db, list_shots, query_regions
from .segment import RegionKind, RegionRecord, band_summary

logger = logging.getLogger(__name__)

app = FastAPI(
    title="tfmodes API",
    description="Consulta de regiones coherentes y transitorias detectadas por disparo.",
    version=__version__,
)

# --- Middlewares ---
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET"],
    allow_headers=["*"],
)

api_router = APIRouter(prefix="/api")


# --- Modelos Pydantic (DTOs) ---

class ShotSummary(BaseModel):
    shot_id: str
    channels: List[str]
    n_regions: int


class RegionResponse(RegionRecord):
    channel_id: str


class BandResponse(BaseModel):
    band: str
    f_lo_khz: float
    f_hi_khz: float
    n_regions: int
    amplitude: float
    amplitude_db: float


# --- Endpoints ---

@api_router.get("/shots", response_model=List[ShotSummary], tags=["Shots"])
def get_shots(db: Session = Depends(get_db)):
    summaries = []
    for shot_id in list_shots(db):
        rows = query_regions(db, shot_id)
        summaries.append(ShotSummary(
            shot_id=shot_id,
            channels=sorted({row.channel_id for row in rows}),
            n_regions=len(rows),
        ))
    return summaries


@api_router.get("/shots/{shot_id}/regions", response_model=List[RegionResponse], tags=["Regions"])
def get_regions(
    shot_id: str,
    channel_id: Optional[str] = None,
    kind: Optional[RegionKind] = None,
    f_min_khz: Optional[float] = Query(None, ge=0),
    f_max_khz: Optional[float] = Query(None, ge=0),
    db: Session = Depends(get_db),
):
    """Regiones de un disparo, filtradas por canal, tipo y solapamiento en frecuencia."""
    if shot_id not in list_shots(db):
        raise HTTPException(status_code=404, detail=f"Shot {shot_id} not found")
    rows = query_regions(db, shot_id, channel_id=channel_id, kind=kind, f_min_khz=f_min_khz, f_max_khz=f_max_khz)
    return [RegionResponse(channel_id=row.channel_id, **row.to_record().model_dump()) for row in rows]


@api_router.get("/shots/{shot_id}/bands", response_model=List[BandResponse], tags=["Regions"])
def get_bands(
    shot_id: str,
    split_khz: float = Query(50.0, gt=0),
    max_khz: float = Query(250.0, gt=0),
    channel_id: Optional[str] = None,
    db: Session = Depends(get_db),
):
    """Resumen de regiones coherentes por banda (por defecto, por debajo y por encima de 50 kHz)."""
    if shot_id not in list_shots(db):
        raise HTTPException(status_code=404, detail=f"Shot {shot_id} not found")
    if split_khz >= max_khz:
        raise HTTPException(status_code=400, detail="split_khz must be below max_khz")
    records = [row.to_record() for row in query_regions(db, shot_id, channel_id=channel_id)]
    summary = band_summary(records, (0.0, split_khz, max_khz))
    return [BandResponse(**row) for row in json.loads(summary.to_json(orient="records", double_precision=15))]


# -- Punto de Entrada y Eventos --

@app.get("/", tags=["Root"])
async def root():
    return {"message": "tfmodes region API", "version": __version__}


app.include_router(api_router)


@app.on_event("startup")
async def startup_event():
    if database.engine is None:
        database.configure()
    logging.info(f"Region store ready at {database.engine.url}")
