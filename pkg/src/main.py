import logging
from typing import List, Optional
from uuid import uuid4

from fastapi import BackgroundTasks, FastAPI, Query
from fastapi.middleware.cors import CORSMiddleware

from src.idlewatch.configs import configure_logging
from src.idlewatch.errors import IdlewatchError
from src.idlewatch.mc_harness import SweepSpec, run_sweep
from src.idlewatch.sequential_stats import theorem1_row

configure_logging()
logger = logging.getLogger(__name__)


# Memory store for jobs (in-memory dict for now)
jobs = {}


app = FastAPI(title="idlewatch")


app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Background sweep; sync so FastAPI runs it in the threadpool
def process_sweep(job_id: str, spec: SweepSpec, out_dir: Optional[str] = None):
    try:
        records = run_sweep(spec, out_dir=out_dir, progress=False)
        jobs[job_id] = {"status": "done", "response": [r.model_dump() for r in records]}
    except IdlewatchError as e:
        logger.error("sweep job %s failed: %s", job_id, e)
        jobs[job_id] = {"status": "error", "response": f"Error: {e}"}
    except Exception as e:
        logger.exception("sweep job %s crashed", job_id)
        jobs[job_id] = {"status": "error", "response": f"Error: {e}"}


# POST to start a sweep
@app.post("/start-sweep")
async def start_sweep(spec: SweepSpec, bg: BackgroundTasks, out_dir: Optional[str] = None):
    job_id = str(uuid4())
    jobs[job_id] = {"status": "processing", "response": None}
    bg.add_task(process_sweep, job_id, spec, out_dir)
    logger.info(
        "job %s: %s sweep over %d cells", job_id, spec.detector, len(spec.inr_db_list) * len(spec.threshold_list)
    )
    return {"job_id": job_id}


# Polling endpoint
@app.get("/get-response/{job_id}")
async def get_result(job_id: str):
    job = jobs.get(job_id)
    if not job:
        return {"status": "not_found", "response": "Invalid job ID."}
    return job


# Closed-form bounds next to the quadrature value, one row per INR
@app.get("/theorem1")
def theorem1(sigma_db: List[float] = Query(...)):
    rows = []
    for value in sigma_db:
        try:
            row = theorem1_row(value)
        except IdlewatchError as e:
            rows.append({"sigma_db": value, "error": str(e)})
            continue
        rows.append(
            {
                "sigma_db": row.sigma_db,
                "information": row.information,
                "inverse_information": row.inverse_information,
                "lower": row.lower,
                "upper": row.upper,
                "fitted_a": row.fitted_a,
                "within_bounds": row.within_bounds,
            }
        )
    return {"rows": rows}
