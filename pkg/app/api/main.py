'''
this is the main API file for TriPlan.
it sets up the FastAPI app and includes the planning routes.
'''
from fastapi import FastAPI

from app.api.routes import router
from config.settings import TOOL_VERSION

app = FastAPI(
    title="TriPlan API",
    description="Pipeline schedules, recomputation plans and 3D parallel plan search",
    version=TOOL_VERSION,
)
app.include_router(router)


@app.get("/", summary="health check endpoint")
def health_check():
    return {"status": "ok", "message": "TriPlan API is running"}
