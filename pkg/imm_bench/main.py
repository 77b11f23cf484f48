from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field, field_validator
from typing import List, Optional
import json
import asyncio
import logging
from imm_bench.bench_service import OBSERVER_NAMES, BatchConfig, bench_service as bench_service_instance, run_benchmark
from imm_bench.config_manager import get_run_settings
from imm_bench.imm_estimator import EstimatorConfig
from imm_bench.leg_dynamics import default_leg
from imm_bench.scenario_sim import Scenario, SimulationDivergedError

# Configure logging to suppress access logs for status polling
logging.getLogger("uvicorn.access").setLevel(logging.WARNING)

app = FastAPI(title="IMM Contact Bench API", version="1.0.0")

# Enable CORS for local dashboards
app.add_middleware(
    CORSMiddleware,
    allow_origins=["http://localhost:5173", "http://127.0.0.1:5173", "http://localhost:3000", "http://127.0.0.1:3000"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class SimulateRequest(BaseModel):
    scenario: Scenario = Field(default_factory=Scenario)
    observers: List[str] = Field(default_factory=lambda: list(OBSERVER_NAMES))
    estimator: Optional[EstimatorConfig] = None

    @field_validator("observers")
    @classmethod
    def check_observers(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in OBSERVER_NAMES]
        if unknown or not value:
            raise ValueError(f"unknown observers {unknown}; valid names: {', '.join(OBSERVER_NAMES)}")
        return value


class BenchStatusResponse(BaseModel):
    session_id: str
    status: str
    is_running: bool
    output: List[str]
    start_time: Optional[str] = None
    report: Optional[dict] = None
    error: Optional[str] = None


@app.get("/")
async def root():
    return {"message": "IMM Contact Bench API"}

@app.get("/health")
async def health_check():
    return {"status": "healthy"}

@app.get("/config/estimator")
async def get_estimator_config():
    """
    Default estimator configuration and the active run settings
    """
    return {"estimator": EstimatorConfig().model_dump(mode="json"), "run_settings": get_run_settings()}

@app.post("/simulate")
async def simulate_scenario(request: SimulateRequest):
    """
    Simulate one scenario and score the selected observers on it
    """
    try:
        report = await asyncio.to_thread(
            run_benchmark, request.observers, [request.scenario], default_leg(), request.estimator
        )
        return {
            "success": True,
            "ticks": request.scenario.n_ticks,
            "report": report.to_dict(),
        }
    except SimulationDivergedError as e:
        return {"success": False, "message": f"Simulation diverged at tick {e.tick}"}
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Failed to simulate scenario: {str(e)}")

@app.post("/bench/start")
async def start_bench(request: BatchConfig):
    """
    Start an observer benchmark in the background and return a session ID
    """
    try:
        session_id = bench_service_instance.start_benchmark(request)
        return {
            "success": True,
            "session_id": session_id,
            "message": f"Benchmark started on {request.n_scenarios} scenarios",
        }
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Failed to start benchmark: {str(e)}")

@app.get("/bench/status/{session_id}", response_model=BenchStatusResponse)
async def get_bench_status(session_id: str):
    status = bench_service_instance.get_status(session_id)
    if status is None:
        raise HTTPException(status_code=404, detail=f"No benchmark session {session_id}")
    is_running = await bench_service_instance.is_running(session_id)
    return BenchStatusResponse(is_running=is_running, **status)

@app.delete("/bench/stop/{session_id}")
async def stop_bench(session_id: str):
    """
    Cancel a running benchmark
    """
    try:
        success = bench_service_instance.stop_benchmark(session_id)
        return {
            "success": success,
            "message": "Benchmark stopped successfully" if success else "Failed to stop benchmark",
        }
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Failed to stop benchmark: {str(e)}")

@app.websocket("/ws/bench/{session_id}")
async def websocket_bench(websocket: WebSocket, session_id: str):
    """
    WebSocket endpoint for real-time benchmark output
    """
    if bench_service_instance.get_status(session_id) is None:
        await websocket.close(code=4004, reason="Session not found")
        return

    await websocket.accept()

    try:
        await websocket.send_text(json.dumps({
            "type": "status",
            "data": {"message": "WebSocket connected", "session_id": session_id}
        }))

        while True:
            is_running = await bench_service_instance.is_running(session_id)

            outputs = await bench_service_instance.get_all_output(session_id)
            for output in outputs:
                await websocket.send_text(json.dumps({
                    "type": "output",
                    "data": output.strip()
                }))

            if not is_running:
                status = bench_service_instance.get_status(session_id)
                if status["report"] is not None:
                    await websocket.send_text(json.dumps({"type": "report", "data": status["report"]}))
                await websocket.send_text(json.dumps({
                    "type": "status",
                    "data": {"is_running": False, "status": status["status"]}
                }))
                break

            await asyncio.sleep(0.05)

    except WebSocketDisconnect:
        pass
    except Exception as e:
        try:
            await websocket.send_text(json.dumps({
                "type": "error",
                "data": str(e)
            }))
        except Exception:
            pass
    finally:
        try:
            await websocket.close()
        except Exception:
            pass


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
